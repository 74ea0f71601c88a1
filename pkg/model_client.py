import base64
import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from collections import OrderedDict, defaultdict
from contextlib import contextmanager
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import httpx
import numpy as np
from pydantic import BaseModel, Field, model_validator
from tenacity import Retrying, retry_if_exception, stop_after_attempt
from tenacity.wait import wait_base

from errors import DimensionMismatchError, ProviderUnavailable

logger = logging.getLogger(__name__)


class ProviderRole(str, Enum):
    PARSER = "parser"
    SUPERVISOR = "supervisor"
    RELATION = "relation"
    VERIFIER = "verifier"
    SUMMARIZER = "summarizer"
    EMBEDDER = "embedder"


class ProviderMode(str, Enum):
    STUB = "stub"
    HTTP = "http"


class ProviderConfig(BaseModel):
    """Connection settings for one provider role"""
    role: ProviderRole
    mode: ProviderMode = ProviderMode.STUB
    endpoint: Optional[str] = None
    model: Optional[str] = None
    token_env: Optional[str] = Field(default=None, description="Name of the env var holding the bearer token")
    timeout_s: float = Field(default=30.0, gt=0)
    max_retries: int = Field(default=3, ge=0)
    backoff_base_s: float = Field(default=1.0, ge=0)
    backoff_factor: float = Field(default=2.0, ge=1.0)
    max_concurrent: int = Field(default=4, ge=1)

    @model_validator(mode="after")
    def check_http_target(self) -> "ProviderConfig":
        if self.mode == ProviderMode.HTTP and (not self.endpoint or not self.model):
            raise ValueError(f"{self.role.value}: http mode requires endpoint and model")
        return self


def _role_default(role: ProviderRole):
    return lambda: ProviderConfig(role=role, token_env=f"IKB_{role.name}_TOKEN")


class ProvidersConfig(BaseModel):
    """Per-role provider settings, addressable as providers.<role>.<field>"""
    parser: ProviderConfig = Field(default_factory=_role_default(ProviderRole.PARSER))
    supervisor: ProviderConfig = Field(default_factory=_role_default(ProviderRole.SUPERVISOR))
    relation: ProviderConfig = Field(default_factory=_role_default(ProviderRole.RELATION))
    verifier: ProviderConfig = Field(default_factory=_role_default(ProviderRole.VERIFIER))
    summarizer: ProviderConfig = Field(default_factory=_role_default(ProviderRole.SUMMARIZER))
    embedder: ProviderConfig = Field(default_factory=_role_default(ProviderRole.EMBEDDER))
    stub_fixtures: Optional[str] = None

    @model_validator(mode="before")
    @classmethod
    def inject_roles(cls, data):
        if isinstance(data, dict):
            data = dict(data)
            for role in ProviderRole:
                section = data.get(role.value)
                if isinstance(section, dict):
                    section = {"token_env": f"IKB_{role.name}_TOKEN", **section, "role": role.value}
                    data[role.value] = section
        return data

    def for_role(self, role: ProviderRole) -> ProviderConfig:
        return getattr(self, ProviderRole(role).value)


class ChatExchange(BaseModel):
    """One request/reply round trip with a chat provider"""
    system_prompt: str
    user_text: str
    images: List[bytes] = Field(default_factory=list)
    reply: str = ""
    latency_ms: float = Field(default=0.0, ge=0.0)
    attempts: int = Field(default=0, ge=0)


# ---------------------------------------------------------------------------
# Latency accounting
# ---------------------------------------------------------------------------

class LatencyStats(BaseModel):
    count: int
    mean_ms: float
    p95_ms: float


# Row structure of the cloud-vs-local latency table
LATENCY_TABLE_ROWS: Tuple[Tuple[str, str], ...] = (
    ("Node Desc. (s/node)", ProviderRole.SUMMARIZER.value),
    ("Rel. Verify (s/edge)", ProviderRole.RELATION.value),
    ("Intent Parse (s)", ProviderRole.PARSER.value),
    ("VLM Verify (s)", ProviderRole.VERIFIER.value),
    ("Total Query (s)", "query"),
)


class LatencyRecorder:
    """Thread-safe per-role latency samples"""

    def __init__(self):
        self._lock = threading.Lock()
        self._samples: Dict[str, List[float]] = defaultdict(list)

    def record_latency(self, role: str, ms: float) -> None:
        with self._lock:
            self._samples[str(role)].append(float(ms))

    def latency_report(self) -> Dict[str, LatencyStats]:
        with self._lock:
            snapshot = {role: list(values) for role, values in self._samples.items() if values}
        return {
            role: LatencyStats(
                count=len(values),
                mean_ms=float(np.mean(values)),
                p95_ms=float(np.percentile(values, 95)),
            )
            for role, values in sorted(snapshot.items())
        }

    def table_rows(self) -> List[Tuple[str, Optional[float]]]:
        """Mean seconds per row of the latency table; None where no samples exist"""
        report = self.latency_report()
        rows = []
        for title, role in LATENCY_TABLE_ROWS:
            stats = report.get(role)
            rows.append((title, stats.mean_ms / 1000.0 if stats else None))
        return rows

    def reset(self) -> None:
        with self._lock:
            self._samples.clear()


_recorder_instance: Optional[LatencyRecorder] = None


def get_latency_recorder() -> LatencyRecorder:
    """Get or create the process-wide latency recorder"""
    global _recorder_instance
    if _recorder_instance is None:
        _recorder_instance = LatencyRecorder()
    return _recorder_instance


def record_latency(role: str, ms: float) -> None:
    get_latency_recorder().record_latency(role, ms)


def latency_report() -> Dict[str, LatencyStats]:
    return get_latency_recorder().latency_report()


# ---------------------------------------------------------------------------
# Stub behaviour
# ---------------------------------------------------------------------------

def prompt_key(system_prompt: str, user_text: str) -> str:
    return hashlib.sha256(f"{system_prompt}\n\n{user_text}".encode("utf-8")).hexdigest()


class StubFixtures:
    """Canned replies keyed by (role, prompt hash), with optional per-role defaults"""

    def __init__(self):
        self._replies: Dict[Tuple[str, str], str] = {}
        self._defaults: Dict[str, str] = {}

    def register(self, role: ProviderRole, system_prompt: str, user_text: str, reply: str) -> None:
        self._replies[(ProviderRole(role).value, prompt_key(system_prompt, user_text))] = reply

    def register_default(self, role: ProviderRole, reply: str) -> None:
        self._defaults[ProviderRole(role).value] = reply

    def lookup(self, role: ProviderRole, system_prompt: str, user_text: str) -> Optional[str]:
        role_name = ProviderRole(role).value
        reply = self._replies.get((role_name, prompt_key(system_prompt, user_text)))
        if reply is None:
            reply = self._defaults.get(role_name)
        return reply

    def clear(self) -> None:
        self._replies.clear()
        self._defaults.clear()

    @classmethod
    def load(cls, path: str) -> "StubFixtures":
        """
        Load fixtures from JSON: {"fixtures": [{"role", "system", "user", "reply"}], "defaults": {role: reply}}
        """
        fixtures = cls()
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        for item in data.get("fixtures", []):
            fixtures.register(item["role"], item.get("system", ""), item.get("user", ""), item["reply"])
        for role, reply in data.get("defaults", {}).items():
            fixtures.register_default(role, reply)
        return fixtures


_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

STOPWORDS = frozenset({
    "a", "an", "the", "of", "and", "or", "is", "are", "was", "that", "which", "this",
    "it", "its", "to", "in", "on", "at", "with", "for", "by", "from", "one",
})


def tokenize(text: str) -> List[str]:
    return [t for t in (m.group(0).lower() for m in _TOKEN_RE.finditer(text)) if t not in STOPWORDS]


@lru_cache(maxsize=65536)
def _token_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    vector = np.random.Generator(np.random.PCG64(seed)).standard_normal(dim)
    vector /= np.linalg.norm(vector)
    vector.setflags(write=False)
    return vector


def stub_embedding(text: str, dim: int) -> np.ndarray:
    """
    Deterministic bag-of-tokens embedding

    Each distinct token maps to a fixed pseudo-random unit vector; the text vector is
    their normalized sum, so identical token sets give cosine exactly 1.0.
    """
    tokens = sorted(set(tokenize(text)))
    if not tokens:
        stripped = text.strip().lower()
        if not stripped:
            raise ValueError("cannot embed empty text")
        tokens = [stripped]
    total = np.zeros(dim, dtype=np.float64)
    for token in tokens:
        total += _token_vector(token, dim)
    return total / np.linalg.norm(total)


# ---------------------------------------------------------------------------
# HTTP plumbing
# ---------------------------------------------------------------------------

_SLOTS_LOCK = threading.Lock()
_ENDPOINT_SLOTS: Dict[str, threading.BoundedSemaphore] = {}


@contextmanager
def _endpoint_slot(endpoint: str, limit: int) -> Iterator[None]:
    with _SLOTS_LOCK:
        slot = _ENDPOINT_SLOTS.setdefault(endpoint, threading.BoundedSemaphore(limit))
    with slot:
        yield


class wait_backoff_jitter(wait_base):
    """Exponential backoff base * factor^(n-1), scaled by a uniform ±jitter"""

    def __init__(self, base: float, factor: float, jitter: float = 0.1, rng: Optional[random.Random] = None):
        self.base = base
        self.factor = factor
        self.jitter = jitter
        self.rng = rng or random.Random()

    def __call__(self, retry_state) -> float:
        delay = self.base * self.factor ** (retry_state.attempt_number - 1)
        return delay * self.rng.uniform(1.0 - self.jitter, 1.0 + self.jitter)


def _is_retryable(exc: BaseException) -> bool:
    if isinstance(exc, httpx.HTTPStatusError):
        status = exc.response.status_code
        return status == 429 or status >= 500
    return isinstance(exc, httpx.TransportError)


def image_part(png_bytes: bytes) -> Dict[str, object]:
    encoded = base64.b64encode(png_bytes).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{encoded}"}}


# least recently used texts are dropped beyond this many cached embeddings
EMBED_CACHE_SIZE = 4096


class ModelClient:
    """Stateless provider client for one role, speaking the OpenAI-compatible wire format"""

    def __init__(
        self,
        config: ProviderConfig,
        embedding_dim: int = 512,
        fixtures: Optional[StubFixtures] = None,
        recorder: Optional[LatencyRecorder] = None,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
        embed_cache_size: int = EMBED_CACHE_SIZE,
    ):
        self.config = config
        self.embedding_dim = embedding_dim
        self.fixtures = fixtures if fixtures is not None else get_stub_fixtures()
        self.recorder = recorder if recorder is not None else get_latency_recorder()
        self._transport = transport
        self._sleep = sleep
        self._http: Optional[httpx.Client] = None
        self._embed_cache: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._embed_cache_size = embed_cache_size
        self._cache_lock = threading.Lock()

    @property
    def role(self) -> ProviderRole:
        return self.config.role

    @property
    def is_stub(self) -> bool:
        return self.config.mode == ProviderMode.STUB

    def _client(self) -> httpx.Client:
        if self._http is None:
            self._http = httpx.Client(transport=self._transport, timeout=self.config.timeout_s)
        return self._http

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.getenv(self.config.token_env) if self.config.token_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, path: str, payload: Dict[str, object]) -> Tuple[Dict[str, object], int]:
        """POST with retries; returns (json body, attempts)"""
        url = f"{self.config.endpoint.rstrip('/')}/{path}"
        attempts = 0
        retrying = Retrying(
            stop=stop_after_attempt(self.config.max_retries + 1),
            wait=wait_backoff_jitter(self.config.backoff_base_s, self.config.backoff_factor),
            retry=retry_if_exception(_is_retryable),
            sleep=self._sleep,
            reraise=True,
        )
        try:
            for attempt in retrying:
                with attempt:
                    attempts = attempt.retry_state.attempt_number
                    if attempts > 1:
                        logger.warning(f"{self.role.value}: retrying {url} (attempt {attempts})")
                    with _endpoint_slot(self.config.endpoint, self.config.max_concurrent):
                        response = self._client().post(url, json=payload, headers=self._headers())
                    response.raise_for_status()
                    return response.json(), attempts
        except (httpx.HTTPError, ValueError) as e:
            raise ProviderUnavailable(self.role.value, f"{type(e).__name__}: {e} after {attempts} attempts") from e
        raise ProviderUnavailable(self.role.value, "no attempt was made")

    def chat_exchange(self, system_prompt: str, user_text: str, images: Sequence[bytes] = ()) -> ChatExchange:
        """
        Run one chat completion

        Args:
            system_prompt: Fixed role prompt loaded from prompts/
            user_text: Request-specific text
            images: PNG payloads attached as data-URL parts

        Returns:
            ChatExchange holding the reply, latency and attempt count

        Raises:
            ProviderUnavailable: stub without fixture, or retries exhausted
        """
        started = time.perf_counter()
        if self.is_stub:
            reply = self.fixtures.lookup(self.role, system_prompt, user_text)
            if reply is None:
                raise ProviderUnavailable(self.role.value, "no stub fixture registered")
            attempts = 0
        else:
            content: List[Dict[str, object]] = [{"type": "text", "text": user_text}]
            content.extend(image_part(png) for png in images)
            payload = {
                "model": self.config.model,
                "temperature": 0.0,
                "messages": [
                    {"role": "system", "content": system_prompt},
                    {"role": "user", "content": content},
                ],
            }
            body, attempts = self._post("chat/completions", payload)
            try:
                reply = body["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError) as e:
                raise ProviderUnavailable(self.role.value, f"malformed completion body: {e}") from e
            if not isinstance(reply, str):
                raise ProviderUnavailable(self.role.value, "completion content is not text")
        latency_ms = (time.perf_counter() - started) * 1000.0
        self.recorder.record_latency(self.role.value, latency_ms)
        return ChatExchange(
            system_prompt=system_prompt,
            user_text=user_text,
            images=list(images),
            reply=reply,
            latency_ms=latency_ms,
            attempts=attempts,
        )

    def chat(self, system_prompt: str, user_text: str, images: Sequence[bytes] = ()) -> str:
        return self.chat_exchange(system_prompt, user_text, images).reply

    def embed(self, text: str) -> np.ndarray:
        """Unit-norm embedding of `text` with the map's embedding dimension"""
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        with self._cache_lock:
            cached = self._embed_cache.get(text)
            if cached is not None:
                self._embed_cache.move_to_end(text)
        if cached is not None:
            return cached
        if self.is_stub:
            vector = stub_embedding(text, self.embedding_dim)
        else:
            started = time.perf_counter()
            body, _ = self._post("embeddings", {"model": self.config.model, "input": text})
            try:
                vector = np.asarray(body["data"][0]["embedding"], dtype=np.float64)
            except (KeyError, IndexError, TypeError) as e:
                raise ProviderUnavailable(self.role.value, f"malformed embedding body: {e}") from e
            self.recorder.record_latency(self.role.value, (time.perf_counter() - started) * 1000.0)
            if vector.shape != (self.embedding_dim,):
                raise DimensionMismatchError(
                    f"embedder returned dimension {vector.shape[0]}, map uses {self.embedding_dim}"
                )
            norm = np.linalg.norm(vector)
            if norm == 0:
                raise ProviderUnavailable(self.role.value, "embedder returned a zero vector")
            vector = vector / norm
        vector.setflags(write=False)
        with self._cache_lock:
            self._embed_cache[text] = vector
            while len(self._embed_cache) > self._embed_cache_size:
                self._embed_cache.popitem(last=False)
        return vector

    def close(self) -> None:
        if self._http is not None:
            self._http.close()
            self._http = None


class ProviderSet:
    """One client per provider role"""

    def __init__(self, clients: Dict[ProviderRole, ModelClient]):
        self._clients = clients

    @classmethod
    def from_config(
        cls,
        providers: ProvidersConfig,
        embedding_dim: int,
        fixtures: Optional[StubFixtures] = None,
        recorder: Optional[LatencyRecorder] = None,
        transport: Optional[httpx.BaseTransport] = None,
    ) -> "ProviderSet":
        if fixtures is None:
            fixtures = StubFixtures.load(providers.stub_fixtures) if providers.stub_fixtures else get_stub_fixtures()
        clients = {
            role: ModelClient(
                providers.for_role(role),
                embedding_dim=embedding_dim,
                fixtures=fixtures,
                recorder=recorder,
                transport=transport,
            )
            for role in ProviderRole
        }
        return cls(clients)

    @classmethod
    def stub(cls, embedding_dim: int = 512, fixtures: Optional[StubFixtures] = None) -> "ProviderSet":
        return cls.from_config(ProvidersConfig(), embedding_dim, fixtures=fixtures or StubFixtures())

    def get(self, role: ProviderRole) -> ModelClient:
        return self._clients[role]

    @property
    def embedder(self) -> ModelClient:
        return self._clients[ProviderRole.EMBEDDER]

    def close(self) -> None:
        for client in self._clients.values():
            client.close()


_fixtures_instance: Optional[StubFixtures] = None


def get_stub_fixtures() -> StubFixtures:
    """Get or create the global stub fixture table"""
    global _fixtures_instance
    if _fixtures_instance is None:
        _fixtures_instance = StubFixtures()
    return _fixtures_instance
