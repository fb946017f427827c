"""Deterministic in-process stub for OpenAI-compatible endpoints.

The full pipeline and service test suites run against this server: no GPU, no
network, and byte-identical behavior across runs. Chat requests are dispatched
on distinctive system-prompt phrases to a per-stage synthesizer; synthesized
content derives only from a digest of the request text. Books for stub runs
plant ``<<FLOW>>`` / ``<<NORM>>`` markers in their text, and each marker
visible in a chunk yields exactly one extracted flow / norm.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

import numpy as np

FLOW_MARKER = "<<FLOW>>"
NORM_MARKER = "<<NORM>>"

_FLOW_LEAD = re.compile(r"flow lead (\d+) of chunk ([0-9a-f]{10})")
_NORM_LEAD = re.compile(r"norm lead (\d+) of chunk ([0-9a-f]{10})")
_FIELD_LINE = re.compile(r"^  ([a-z_]+): (.*)$", re.MULTILINE)

_CONTEXTS = ("social etiquette", "family", "governance", "commerce")
_APPROPRIATENESS = ("appropriate", "inappropriate", "ambiguous")
_FORCES = ("obligatory", "prohibited", "permitted", "recommended", "discouraged")


def _digest(text: str) -> str:
    return hashlib.sha1(text.encode("utf-8")).hexdigest()[:10]


def _digest_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def deterministic_embedding(text: str, dim: int) -> list[float]:
    rng = np.random.default_rng(_digest_int(text))
    return rng.standard_normal(dim).tolist()


@dataclass
class StubBehavior:
    embed_dim: int = 64
    # Exact raw vectors (pre-normalization) for specific inputs.
    embed_presets: dict[str, list[float]] = field(default_factory=dict)
    # Character names the synthesized norms drop into norm_subject, plus the
    # role text the abstraction stage swaps in for each name.
    plant_names: list[str] = field(default_factory=list)
    name_rewrites: dict[str, str] = field(default_factory=dict)
    # Queued one-shot responses, keyed by chat kind ("flow_stage1", ...,
    # "judge_grounding") or route ("chat", "embeddings"). Each entry is a dict:
    # {"status": int, "content": str} for chat, {"status": int} or
    # {"vectors": [...]} for embeddings.
    canned: dict[str, list[dict]] = field(default_factory=dict)
    # Kinds/routes that permanently return HTTP 500.
    down: set[str] = field(default_factory=set)
    # When true the abstraction stage keeps character names (forces quarantine).
    abstraction_keep_names: bool = False


def _flow_payload(digest: str, index: int) -> dict:
    x = int(digest, 16) + index
    return {
        "sender": f"speaker-{digest}-{index}",
        "recipient": f"listener-{digest}-{index}",
        "subject": f"subject-{digest}-{index}",
        "information_type": f"personal news {index}",
        "transmission_principle": "confidentiality",
        "context": _CONTEXTS[x % len(_CONTEXTS)],
        "appropriateness": _APPROPRIATENESS[x % len(_APPROPRIATENESS)],
        "norms_invoked": [f"norm statement {digest}-{index}"],
        "norm_source": "implicit",
        "is_new_flow": False,
        "confidence": 5 + (x % 6),
    }


def _norm_payload(behavior: StubBehavior, digest: str, index: int) -> dict:
    x = int(digest, 16) + index
    if behavior.plant_names and index % 3 == 0:
        subject = f"{behavior.plant_names[x % len(behavior.plant_names)]} the elder"
    else:
        subject = "a household servant"
    governs = x % 2 == 0
    return {
        "prescriptive_element": "must",
        "norm_subject": subject,
        "norm_act": f"observe custom {digest}-{index}",
        "condition_of_application": "when guests are present" if x % 2 else None,
        "normative_force": _FORCES[x % len(_FORCES)],
        "context": _CONTEXTS[x % len(_CONTEXTS)],
        "norm_articulation": (
            f"A person of standing must observe custom {digest}-{index} "
            "when occasion requires."
        ),
        "norm_source": "implicit",
        "governs_information_flow": governs,
        "information_flow_note": "constrains disclosure of private matters" if governs else None,
        "confidence_qual": "certain",
        "confidence_quant": 7 + (x % 2),
    }


class _StubLogic:
    """Pure request -> response synthesis, shared by the HTTP handler."""

    def __init__(self, behavior: StubBehavior):
        self.behavior = behavior
        self.calls: list[dict] = []
        self._lock = threading.Lock()

    def count(self, kind: str) -> int:
        with self._lock:
            return sum(1 for call in self.calls if call["kind"] == kind)

    def _record(self, kind: str, route: str) -> None:
        with self._lock:
            self.calls.append({"kind": kind, "route": route})

    def _scripted(self, keys: list[str]) -> Optional[dict]:
        with self._lock:
            for key in keys:
                if key in self.behavior.down:
                    return {"status": 500, "content": "scripted outage"}
                queue = self.behavior.canned.get(key)
                if queue:
                    return queue.pop(0)
        return None

    # -- chat ---------------------------------------------------------------

    @staticmethod
    def classify(system: str) -> str:
        markers = (
            ("identifying information flows in literary texts", "flow_stage1"),
            ("structured information extraction specialist", "flow_stage2"),
            ("expert in normative analysis", "norm_stage1"),
            ("structured norm extraction specialist", "norm_stage2"),
            ("norm abstraction specialist", "abstraction"),
            ("extracted information flow is grounded", "judge_grounding"),
            ("passage contains information flows", "judge_coverage"),
            ("identifying and classifying **information flows**", "task"),
        )
        for needle, kind in markers:
            if needle in system:
                return kind
        return "chat"

    def chat(self, body: dict) -> tuple[int, dict]:
        messages = body.get("messages", [])
        system = next((m["content"] for m in messages if m["role"] == "system"), "")
        user = next((m["content"] for m in messages if m["role"] == "user"), "")
        kind = self.classify(system)
        self._record(kind, "chat")
        scripted = self._scripted([kind, "chat"])
        if scripted is not None:
            status = scripted.get("status", 200)
            if status != 200:
                return status, {"error": scripted.get("content", "scripted error")}
            if "content" in scripted:
                return 200, self._chat_body(scripted["content"])
        content = self._synthesize(kind, user)
        return 200, self._chat_body(content)

    @staticmethod
    def _chat_body(content: str) -> dict:
        return {"choices": [{"message": {"role": "assistant", "content": content}}]}

    def _synthesize(self, kind: str, user: str) -> str:
        b = self.behavior
        if kind == "flow_stage1":
            digest = _digest(user)
            n = user.count(FLOW_MARKER)
            leads = [
                {
                    "original_text_snippet": f"snippet-{digest}-{i}",
                    "reasoning": f"flow lead {i} of chunk {digest}",
                    "context_identified": _CONTEXTS[(int(digest, 16) + i) % len(_CONTEXTS)],
                    "flow_direction": f"speaker-{digest}-{i} tells listener-{digest}-{i}",
                    "potential_appropriateness": "appropriate",
                    "is_new_flow": False,
                }
                for i in range(n)
            ]
            return json.dumps(
                {
                    "reasoning": f"stub flow reasoning for chunk {digest} ({n} flows)",
                    "has_information_exchange": n > 0,
                    "flows": leads,
                },
                ensure_ascii=False,
            )
        if kind == "flow_stage2":
            match = _FLOW_LEAD.search(user)
            if not match:
                return json.dumps(_flow_payload(_digest(user), 0), ensure_ascii=False)
            index, digest = int(match.group(1)), match.group(2)
            return json.dumps(_flow_payload(digest, index), ensure_ascii=False)
        if kind == "norm_stage1":
            digest = _digest(user)
            n = user.count(NORM_MARKER)
            leads = [
                {
                    "original_text_snippet": f"norm-snippet-{digest}-{i}",
                    "reasoning": f"norm lead {i} of chunk {digest}",
                    "preliminary_normative_force": _FORCES[(int(digest, 16) + i) % len(_FORCES)],
                    "governs_information_flow": (int(digest, 16) + i) % 2 == 0,
                }
                for i in range(n)
            ]
            return json.dumps(
                {"has_prescriptive_content": n > 0, "norms": leads},
                ensure_ascii=False,
            )
        if kind == "norm_stage2":
            pairs = [(int(i), d) for i, d in _NORM_LEAD.findall(user)]
            norms = [_norm_payload(b, digest, index) for index, digest in pairs]
            return json.dumps(
                {"has_prescriptive_content": bool(norms), "norms": norms},
                ensure_ascii=False,
            )
        if kind == "abstraction":
            fields = dict(_FIELD_LINE.findall(user))
            def rewrite(value: Optional[str]) -> Optional[str]:
                if value in (None, "null"):
                    return None
                if not b.abstraction_keep_names:
                    for name, role in b.name_rewrites.items():
                        value = value.replace(name, role)
                return value
            return json.dumps(
                {
                    "norm_subject": rewrite(fields.get("norm_subject", "a person")),
                    "norm_act": rewrite(fields.get("norm_act", "act properly")),
                    "condition_of_application": rewrite(fields.get("condition_of_application")),
                    "norm_articulation": rewrite(
                        fields.get("norm_articulation", "A person must act properly.")
                    ),
                    "role_rationale": "Replaced character names with functional social roles.",
                },
                ensure_ascii=False,
            )
        if kind == "judge_grounding":
            x = _digest_int(user)
            return json.dumps(
                {
                    "norm_match_score": (x % 101) / 100,
                    "governance_score": ((x >> 8) % 101) / 100,
                    "appropriateness_consistent": bool((x >> 16) & 1),
                    "explanation": "stub grounding verdict",
                },
                ensure_ascii=False,
            )
        if kind == "judge_coverage":
            x = _digest_int(user)
            score = (x % 101) / 100
            return json.dumps(
                {
                    "passage_contains_governed_flows": score > 0.5,
                    "coverage_score": score,
                    "explanation": "stub coverage verdict",
                },
                ensure_ascii=False,
            )
        if kind == "task":
            digest = _digest(user)
            n = user.count(FLOW_MARKER)
            return json.dumps(
                {
                    "reasoning": f"stub task reasoning for chunk {digest}",
                    "has_information_exchange": n > 0,
                    "flows": [_flow_payload(digest, i) for i in range(n)],
                },
                ensure_ascii=False,
            )
        return "stub completion"

    # -- embeddings -----------------------------------------------------------

    def embeddings(self, body: dict) -> tuple[int, dict]:
        self._record("embeddings", "embeddings")
        inputs = body.get("input", [])
        if isinstance(inputs, str):
            inputs = [inputs]
        scripted = self._scripted(["embeddings"])
        if scripted is not None:
            status = scripted.get("status", 200)
            if status != 200:
                return status, {"error": scripted.get("content", "scripted error")}
            vectors = scripted["vectors"]
        else:
            vectors = [
                self.behavior.embed_presets.get(
                    text, deterministic_embedding(text, self.behavior.embed_dim)
                )
                for text in inputs
            ]
        data = [
            {"object": "embedding", "index": i, "embedding": vec}
            for i, vec in enumerate(vectors)
        ]
        return 200, {"object": "list", "data": data}

    def models(self) -> tuple[int, dict]:
        self._record("models", "models")
        if "models" in self.behavior.down:
            return 500, {"error": "scripted outage"}
        return 200, {"object": "list", "data": [{"id": "stub-model"}]}


class _Handler(BaseHTTPRequestHandler):
    logic: _StubLogic  # set on the subclass

    def log_message(self, fmt, *args):  # silence request logging
        pass

    def _respond(self, status: int, payload: dict) -> None:
        body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path.endswith("/models"):
            status, payload = self.logic.models()
            self._respond(status, payload)
        else:
            self._respond(404, {"error": f"unknown path {self.path}"})

    def do_POST(self):
        length = int(self.headers.get("Content-Length", "0"))
        try:
            body = json.loads(self.rfile.read(length) or b"{}")
        except json.JSONDecodeError:
            self._respond(400, {"error": "invalid JSON body"})
            return
        if self.path.endswith("/chat/completions"):
            status, payload = self.logic.chat(body)
        elif self.path.endswith("/embeddings"):
            status, payload = self.logic.embeddings(body)
        else:
            status, payload = 404, {"error": f"unknown path {self.path}"}
        self._respond(status, payload)


class StubServer:
    """Threaded stub endpoint bound to an ephemeral localhost port."""

    def __init__(self, behavior: Optional[StubBehavior] = None):
        self.behavior = behavior or StubBehavior()
        self.logic = _StubLogic(self.behavior)
        handler = type("BoundHandler", (_Handler,), {"logic": self.logic})
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1"

    @property
    def calls(self) -> list[dict]:
        return self.logic.calls

    def count(self, kind: str) -> int:
        return self.logic.count(kind)

    def start(self) -> "StubServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "StubServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
