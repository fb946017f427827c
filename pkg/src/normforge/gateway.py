"""Client for OpenAI-compatible chat-completion and embedding endpoints.

All model identities live in :class:`EndpointConfig` values resolved from
config files or ``NORMFORGE_*`` environment variables; nothing here hardcodes
a model. The client retries transient failures with exponential backoff and
L2-normalizes every embedding itself so downstream cosine math never depends
on endpoint conventions.
"""

from __future__ import annotations

import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import httpx
import numpy as np


class GatewayError(Exception):
    """Base class for gateway failures."""


class TransportError(GatewayError):
    """Connection/timeout/5xx failure that survived all retries."""


class EndpointError(GatewayError):
    """The endpoint rejected the request (4xx)."""

    def __init__(self, message: str, status_code: int = 0):
        super().__init__(message)
        self.status_code = status_code


class ConstraintUnsupported(EndpointError):
    """The endpoint rejected the guided-decoding constraint."""


class EmptyCompletion(GatewayError):
    """The endpoint returned no assistant content."""


class DimensionMismatch(GatewayError):
    """The endpoint returned embeddings of inconsistent dimension."""


_THINK_BLOCK = re.compile(r"<think>.*?</think>", re.DOTALL)
_THINK_OPEN = "<think>"


def strip_think_blocks(completion: str) -> str:
    """Remove every think-delimited block, tags included.

    Runs to a fixpoint so splicing can never expose a new well-formed block,
    which makes the function idempotent. An unpaired opening tag removes
    everything through the end of the string.
    """
    text = completion
    prev = None
    while prev != text:
        prev = text
        text = _THINK_BLOCK.sub("", text)
    cut = text.find(_THINK_OPEN)
    if cut != -1:
        text = text[:cut]
    return text.strip()


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    api_key: Optional[str] = None
    timeout: float = 60.0
    max_retries: int = 3
    temperature: float = 0.0
    # vLLM-style guided decoding: the schema rides in the request body under
    # this key.
    guided_json_field: str = "guided_json"
    embed_batch_size: int = 128

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError(f"timeout must be positive, got {self.timeout}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")

    @classmethod
    def from_env(cls, role: str, **overrides) -> "EndpointConfig":
        """Build a config for a role (extractor/judge/embedder) from NORMFORGE_ vars."""
        prefix = f"NORMFORGE_{role.upper()}_"
        base_url = os.environ.get(prefix + "BASE_URL")
        model = os.environ.get(prefix + "MODEL")
        if not base_url or not model:
            raise ValueError(
                f"missing {prefix}BASE_URL / {prefix}MODEL environment variables"
            )
        kwargs = dict(
            base_url=base_url,
            model_name=model,
            api_key=os.environ.get(prefix + "API_KEY"),
        )
        if prefix + "TIMEOUT" in os.environ:
            kwargs["timeout"] = float(os.environ[prefix + "TIMEOUT"])
        if prefix + "MAX_RETRIES" in os.environ:
            kwargs["max_retries"] = int(os.environ[prefix + "MAX_RETRIES"])
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class CompletionRequest:
    system_prompt: str
    user_prompt: str
    schema_descriptor: Optional[dict] = None
    max_tokens: int = 2048
    extra_body: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("prompts must be non-empty")


class LLMGateway:
    """Thread-safe client bound to one endpoint config.

    In-flight requests are bounded by a semaphore so concurrent reward scoring
    cannot overwhelm the serving endpoint.
    """

    def __init__(
        self,
        cfg: EndpointConfig,
        *,
        max_in_flight: int = 8,
        backoff_base: float = 0.5,
        sleep=time.sleep,
    ):
        self.cfg = cfg
        self._semaphore = threading.Semaphore(max_in_flight)
        self._backoff_base = backoff_base
        self._sleep = sleep
        headers = {}
        if cfg.api_key:
            headers["Authorization"] = f"Bearer {cfg.api_key}"
        self._client = httpx.Client(
            base_url=cfg.base_url.rstrip("/"),
            timeout=cfg.timeout,
            headers=headers,
        )

    def close(self) -> None:
        self._client.close()

    # -- transport ----------------------------------------------------------

    def _post(self, path: str, payload: dict, *, constrained: bool = False) -> dict:
        last_error: Exception | None = None
        attempts = self.cfg.max_retries + 1
        with self._semaphore:
            for attempt in range(attempts):
                if attempt > 0:
                    self._sleep(self._backoff_base * (2 ** (attempt - 1)))
                try:
                    response = self._client.post(path, json=payload)
                except httpx.HTTPError as exc:
                    last_error = exc
                    continue
                if response.status_code >= 500:
                    last_error = TransportError(
                        f"{path} -> {response.status_code}: {response.text[:200]}"
                    )
                    continue
                if response.status_code >= 400:
                    if constrained:
                        raise ConstraintUnsupported(
                            f"endpoint rejected structured-output constraint: "
                            f"{response.status_code}: {response.text[:200]}",
                            status_code=response.status_code,
                        )
                    raise EndpointError(
                        f"{path} -> {response.status_code}: {response.text[:200]}",
                        status_code=response.status_code,
                    )
                return response.json()
        raise TransportError(
            f"{path} failed after {attempts} attempt(s): {last_error}"
        )

    def ping(self) -> bool:
        """Cheap reachability probe against the models listing."""
        try:
            response = self._client.get("/models")
            return response.status_code < 500
        except httpx.HTTPError:
            return False

    # -- chat completions ----------------------------------------------------

    def _complete(self, req: CompletionRequest, *, constrained: bool) -> str:
        payload = {
            "model": self.cfg.model_name,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": self.cfg.temperature,
            "max_tokens": req.max_tokens,
        }
        payload.update(req.extra_body)
        if constrained:
            payload[self.cfg.guided_json_field] = req.schema_descriptor
        data = self._post("/chat/completions", payload, constrained=constrained)
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise EmptyCompletion(f"malformed completion response: {exc}") from exc
        if content is None or content == "":
            raise EmptyCompletion("endpoint returned empty content")
        return content

    def complete_text(self, req: CompletionRequest) -> str:
        return self._complete(req, constrained=False)

    def complete_structured(self, req: CompletionRequest) -> str:
        """Request schema-constrained output; the raw content is still returned
        verbatim so the validation layer always gets the final say."""
        if req.schema_descriptor is None:
            raise ValueError("complete_structured requires a schema_descriptor")
        return self._complete(req, constrained=True)

    # -- embeddings -----------------------------------------------------------

    def embed_batch(self, texts: list[str]) -> np.ndarray:
        """Embed texts in order, returning unit-norm float32 rows."""
        if not texts:
            return np.zeros((0, 0), dtype=np.float32)
        vectors: list[list[float]] = []
        for start in range(0, len(texts), self.cfg.embed_batch_size):
            batch = texts[start : start + self.cfg.embed_batch_size]
            data = self._post(
                "/embeddings", {"model": self.cfg.model_name, "input": batch}
            )
            items = sorted(data["data"], key=lambda item: item["index"])
            if len(items) != len(batch):
                raise DimensionMismatch(
                    f"endpoint returned {len(items)} embeddings for {len(batch)} inputs"
                )
            vectors.extend(item["embedding"] for item in items)
        dims = {len(v) for v in vectors}
        if len(dims) != 1:
            raise DimensionMismatch(f"inconsistent embedding dimensions: {sorted(dims)}")
        matrix = np.asarray(vectors, dtype=np.float64)
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise DimensionMismatch("endpoint returned a zero-norm embedding")
        return (matrix / norms).astype(np.float32)
