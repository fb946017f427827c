from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence
from urllib.parse import urlparse

import requests


class ShimError(Exception):
    pass


class ShimConfigurationError(ShimError):
    """The service rejected the request (4xx): fix the config or data, do not retry."""


class ShimTransportError(ShimError):
    """The service stayed unreachable after the configured retries."""


class ShimDatasetError(ShimError):
    """An exported dataset line is malformed."""


@dataclass(frozen=True)
class ShimConfig:
    service_url: str
    timeout: float = 60.0
    max_retries: int = 3
    chunk_id_field: str = "chunk_id"

    def __post_init__(self):
        parsed = urlparse(self.service_url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ValueError(f"service_url is not a valid http(s) URL: {self.service_url}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")

    @property
    def score_url(self) -> str:
        return self.service_url.rstrip("/") + "/v1/score"


class RewardCallback:
    """Callable reward function for a GRPO trainer.

    Each prompt's metadata must carry the chunk identifier under
    ``config.chunk_id_field``. Consecutive completions sharing a chunk id form
    one group and are scored with a single POST; rewards come back aligned
    with the completions. Training must never silently receive zeros, so any
    unrecoverable failure raises instead of substituting a default.
    """

    def __init__(self, config: ShimConfig, session: requests.Session | None = None,
                 sleep=time.sleep):
        self.config = config
        self.session = session or requests.Session()
        self._sleep = sleep

    def __call__(
        self, prompts_metadata: Sequence[dict], completions: Sequence[str]
    ) -> list[float]:
        if len(prompts_metadata) != len(completions):
            raise ShimConfigurationError(
                f"{len(prompts_metadata)} metadata entries for "
                f"{len(completions)} completions"
            )
        rewards: list[float] = []
        for chunk_id, group, seed in self._groups(prompts_metadata, completions):
            rewards.extend(self._score_group(chunk_id, group, seed))
        return rewards

    def _groups(self, prompts_metadata, completions):
        """Consecutive runs of the same chunk id, preserving order."""
        field = self.config.chunk_id_field
        current_id = None
        current_seed = None
        group: list[str] = []
        for metadata, completion in zip(prompts_metadata, completions):
            if field not in metadata:
                raise ShimConfigurationError(
                    f"prompt metadata missing '{field}': {sorted(metadata)}"
                )
            chunk_id = metadata[field]
            seed = metadata.get("seed")
            if chunk_id != current_id and group:
                yield current_id, group, current_seed
                group = []
            current_id, current_seed = chunk_id, seed
            group.append(completion)
        if group:
            yield current_id, group, current_seed

    def _score_group(self, chunk_id: str, completions: list[str], seed) -> list[float]:
        body = {"chunk_id": chunk_id, "completions": completions}
        if seed is not None:
            body["seed"] = seed
        payload = self._post(body)
        rewards = payload.get("rewards")
        if not isinstance(rewards, list) or len(rewards) != len(completions):
            raise ShimTransportError(
                f"service returned {rewards!r} for a group of {len(completions)}"
            )
        return [float(r) for r in rewards]

    def _post(self, body: dict) -> dict:
        last_error = None
        attempts = self.config.max_retries + 1
        for attempt in range(attempts):
            if attempt > 0:
                self._sleep(0.5 * (2 ** (attempt - 1)))
            try:
                response = self.session.post(
                    self.config.score_url, json=body, timeout=self.config.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if 400 <= response.status_code < 500:
                raise ShimConfigurationError(
                    f"service rejected request ({response.status_code}): "
                    f"{response.text[:200]}"
                )
            if response.status_code >= 500:
                last_error = ShimTransportError(
                    f"{response.status_code}: {response.text[:200]}"
                )
                continue
            return response.json()
        raise ShimTransportError(
            f"reward service unreachable after {attempts} attempt(s): {last_error}"
        )


def reward_callback(
    prompts_metadata: Sequence[dict],
    completions: Sequence[str],
    config: ShimConfig,
) -> list[float]:
    """One-shot functional form of :class:`RewardCallback`."""
    return RewardCallback(config)(prompts_metadata, completions)


def load_sft_dataset(path: Path | str) -> Iterator[tuple[str, str]]:
    """Yield (prompt, target) pairs from an exported SFT file in file order."""
    path = Path(path)
    if not path.exists():
        raise ShimDatasetError(f"dataset file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ShimDatasetError(f"line {lineno}: not valid JSON: {exc}") from exc
            for field in ("prompt", "target"):
                if field not in payload or not isinstance(payload[field], str):
                    raise ShimDatasetError(f"line {lineno}: missing '{field}' field")
            yield payload["prompt"], payload["target"]
