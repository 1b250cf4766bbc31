"""Model inference adapter: HTTP chat-completions client, scriptable stub,
disk cache, and a bounded-concurrency evaluation loop.

The cache key covers (template hash, prompt text, model, temperature);
files store the full preimage, so a hash collision degrades to a miss
instead of returning someone else's completion. Authentication reads a
bearer token from an environment variable and never writes it anywhere.
"""
from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import requests

from .artifacts import atomic_write_text
from .benchmark import CorpusSample
from .prompt import ParseResult, PromptInstance, parse_answer, template_fingerprint


class BackendError(Exception):
    """Non-retryable completion failure."""


class TransientBackendError(Exception):
    """Retryable failure: rate limit, server error, transport hiccup."""


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    backend: str = "stub"            # "http" or "stub"
    base_url: str = ""
    model: str = "stub-model"
    temperature: float = 0.0         # deterministic scoring by default
    max_tokens: int = 512
    timeout_s: float = 30.0
    max_in_flight: int = 4
    retries: int = 2
    backoff_s: float = 0.5
    api_key_env: str = "DVMAP_API_KEY"
    stub_mode: str = "script"        # "script" or "truth_echo"
    stub_rules: tuple[tuple[str, str], ...] = ()

    def validate(self) -> None:
        if self.backend not in ("http", "stub"):
            raise InferenceError(f"unknown backend: {self.backend!r}")
        if self.backend == "http" and not self.base_url:
            raise InferenceError("http backend needs base_url")
        if self.stub_mode not in ("script", "truth_echo"):
            raise InferenceError(f"unknown stub_mode: {self.stub_mode!r}")
        if self.max_in_flight < 1:
            raise InferenceError("max_in_flight must be >= 1")
        if self.retries < 0:
            raise InferenceError("retries must be >= 0")

    def to_json(self) -> dict:
        return {
            "backend": self.backend,
            "base_url": self.base_url,
            "model": self.model,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "timeout_s": self.timeout_s,
            "max_in_flight": self.max_in_flight,
            "retries": self.retries,
            "backoff_s": self.backoff_s,
            "api_key_env": self.api_key_env,
            "stub_mode": self.stub_mode,
            "stub_rules": [list(r) for r in self.stub_rules],
        }


@dataclass
class PredictionRecord:
    sample_id: str
    raw_completion: str
    parse: ParseResult
    latency_s: float = 0.0
    cached: bool = False
    retries: int = 0
    failure: dict | None = None

    def to_json(self) -> dict:
        # Canonical artifact form: execution metadata (latency, cache state,
        # retry count) varies run to run and lives in logs, not artifacts.
        return {
            "sample_id": self.sample_id,
            "raw_completion": self.raw_completion,
            "parse": self.parse.to_json(),
            "failure": self.failure,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PredictionRecord":
        return cls(
            sample_id=str(obj["sample_id"]),
            raw_completion=str(obj["raw_completion"]),
            parse=ParseResult.from_json(obj["parse"]),
            failure=obj.get("failure"),
        )


class _Instrumented:
    """Tracks call volume and peak concurrency; stubs expose these so tests
    can observe the in-flight bound from outside."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls = 0
        self.in_flight = 0
        self.peak_in_flight = 0

    def complete(self, prompt: PromptInstance) -> str:
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
        try:
            return self._complete(prompt)
        finally:
            with self._lock:
                self.in_flight -= 1

    def _complete(self, prompt: PromptInstance) -> str:
        raise NotImplementedError


class StubBackend(_Instrumented):
    """Offline backend scripted as ordered (regex, completion) rules."""

    def __init__(self, rules: Sequence[tuple[str, str]], delay_s: float = 0.0) -> None:
        super().__init__()
        import re
        self._rules = [(re.compile(pattern, re.DOTALL), completion) for pattern, completion in rules]
        self._delay_s = delay_s

    def _complete(self, prompt: PromptInstance) -> str:
        if self._delay_s:
            time.sleep(self._delay_s)
        for pattern, completion in self._rules:
            if pattern.search(prompt.text):
                return completion
        raise BackendError(f"no stub rule matched prompt for {prompt.sample_id}")


class TruthEchoBackend(_Instrumented):
    """Answers every prompt with its sample's ground truth, well-formed."""

    def __init__(self, corpus: Mapping[str, CorpusSample]) -> None:
        super().__init__()
        self._corpus = corpus

    def _complete(self, prompt: PromptInstance) -> str:
        sample = self._corpus.get(prompt.sample_id)
        if sample is None:
            raise BackendError(f"truth echo has no sample {prompt.sample_id}")
        return f"<answer>{sample.truth_label}</answer>"


class HttpBackend(_Instrumented):
    """POSTs {base_url}/chat/completions and reads the first choice."""

    def __init__(self, cfg: EndpointConfig) -> None:
        super().__init__()
        self._cfg = cfg

    def _complete(self, prompt: PromptInstance) -> str:
        cfg = self._cfg
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(cfg.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = {
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        }
        try:
            resp = requests.post(
                cfg.base_url.rstrip("/") + "/chat/completions",
                json=payload, headers=headers, timeout=cfg.timeout_s,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(f"transport: {type(exc).__name__}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"http {resp.status_code}")
        if resp.status_code != 200:
            raise BackendError(f"http {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed response: {type(exc).__name__}") from exc


def make_backend(cfg: EndpointConfig, corpus: Mapping[str, CorpusSample] | None = None):
    cfg.validate()
    if cfg.backend == "http":
        return HttpBackend(cfg)
    if cfg.stub_mode == "truth_echo":
        if corpus is None:
            raise InferenceError("truth_echo stub needs a corpus lookup")
        return TruthEchoBackend(corpus)
    return StubBackend(cfg.stub_rules)


class CompletionCache:
    """Content-addressed JSON file per completion, written atomically."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    @staticmethod
    def key_for(prompt_text: str, model: str, temperature: float) -> tuple[str, dict]:
        preimage = {
            "template": template_fingerprint(),
            "prompt": prompt_text,
            "model": model,
            "temperature": temperature,
        }
        digest = hashlib.sha256(
            json.dumps(preimage, ensure_ascii=False, sort_keys=True).encode("utf-8")
        ).hexdigest()
        return digest, preimage

    def _path(self, digest: str) -> Path:
        return self.root / f"{digest}.json"

    def get(self, digest: str, preimage: dict) -> str | None:
        path = self._path(digest)
        if not path.exists():
            with self._lock:
                self.misses += 1
            return None
        try:
            stored = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            with self._lock:
                self.misses += 1
            return None
        # Collision or corruption guard: the stored preimage must match.
        if {k: stored.get(k) for k in preimage} != preimage:
            with self._lock:
                self.misses += 1
            return None
        with self._lock:
            self.hits += 1
        return str(stored["completion"])

    def put(self, digest: str, preimage: dict, completion: str) -> None:
        body = dict(preimage)
        body["completion"] = completion
        atomic_write_text(self._path(digest), json.dumps(body, ensure_ascii=False, sort_keys=True))


def complete(
    prompt: PromptInstance,
    cfg: EndpointConfig,
    backend,
    cache: CompletionCache | None = None,
) -> PredictionRecord:
    """One completion with cache, retry budget, and typed failure capture."""
    start = time.perf_counter()
    digest = preimage = None
    if cache is not None:
        digest, preimage = cache.key_for(prompt.text, cfg.model, cfg.temperature)
        hit = cache.get(digest, preimage)
        if hit is not None:
            return PredictionRecord(
                sample_id=prompt.sample_id,
                raw_completion=hit,
                parse=parse_answer(hit, prompt.options),
                latency_s=time.perf_counter() - start,
                cached=True,
            )

    text = ""
    failure: dict | None = None
    retries = 0
    for attempt in range(cfg.retries + 1):
        try:
            text = backend.complete(prompt)
            failure = None
            break
        except TransientBackendError as exc:
            failure = {"kind": "transient", "detail": str(exc)}
            if attempt < cfg.retries:
                retries += 1
                if cfg.backoff_s > 0:
                    time.sleep(cfg.backoff_s * (2 ** attempt))
        except BackendError as exc:
            failure = {"kind": "fatal", "detail": str(exc)}
            break

    if failure is None and cache is not None:
        cache.put(digest, preimage, text)
    return PredictionRecord(
        sample_id=prompt.sample_id,
        raw_completion=text if failure is None else "",
        parse=parse_answer(text if failure is None else "", prompt.options),
        latency_s=time.perf_counter() - start,
        cached=False,
        retries=retries,
        failure=failure,
    )


def run_eval(
    prompts: Sequence[PromptInstance],
    corpus: Mapping[str, CorpusSample],
    cfg: EndpointConfig,
    backend=None,
    cache: CompletionCache | None = None,
) -> list[PredictionRecord]:
    """Complete every prompt with bounded concurrency.

    Output order equals input order regardless of completion order, and a
    failing prompt yields a failure record instead of aborting the batch.
    """
    cfg.validate()
    ids = [p.sample_id for p in prompts]
    if len(set(ids)) != len(ids):
        raise InferenceError("duplicate sample ids in prompt batch")
    missing = [i for i in ids if i not in corpus]
    if missing:
        raise InferenceError(f"prompts without corpus samples: {missing[:5]}")
    if backend is None:
        backend = make_backend(cfg, corpus)
    if not prompts:
        return []
    with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
        futures = [pool.submit(complete, p, cfg, backend, cache) for p in prompts]
        return [f.result() for f in futures]
