"""JSON-over-HTTP clients for the captioner, generator and encoder services.

Each service takes a POST with a JSON body:

    /caption   {"image_ref", "instruction"}        -> {"caption"}
    /generate  {"prompt", "seed"}                  -> {"image_ref"}
    /encode    {"kind", "items", "max_tokens"}     -> {"dim", "rows"}

:class:`StubClients` answers the same calls in-process and deterministically.
Stub vectors come from a splitmix64 stream seeded by the 64-bit FNV-1a hash
of ``kind``, the item text, ``max_tokens`` and the stub seed; pairs of 53-bit
uniforms become standard normals by Box-Muller and the vector is unit-normed.
"""
from __future__ import annotations

import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Protocol

import requests

from .errors import BadResponse, DimZero, Exhausted, Timeout

log = logging.getLogger(__name__)

DEFAULT_INSTRUCTION = (
    "<|User|>:\n"
    "    Generate a concise and accurate description for the following image. "
    "Please ensure to include key elements and any details.\n"
    "\n"
    "<|Bot|>:\n"
)
CLIP_MAX_TOKENS = 77
STUB_DIM = 16
ENV_URLS = {
    "caption": "CAPS_CAPTIONER_URL",
    "generate": "CAPS_GENERATOR_URL",
    "encode": "CAPS_ENCODER_URL",
}

_MASK64 = 0xFFFFFFFFFFFFFFFF
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@dataclass
class ClientConfig:
    endpoint: str
    timeout: float = 60.0
    max_retries: int = 2
    backoff: float = 0.5
    token: str | None = None

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be nonnegative")


@dataclass
class CaptionRequest:
    image_ref: str
    instruction: str = DEFAULT_INSTRUCTION


@dataclass
class CaptionResponse:
    caption: str


@dataclass
class GenerateRequest:
    prompt: str
    seed: int


@dataclass
class GenerateResponse:
    image_ref: str


@dataclass
class EncodeRequest:
    kind: str
    items: list[str]
    max_tokens: int = CLIP_MAX_TOKENS


@dataclass
class EncodeResponse:
    dim: int
    rows: list[list[float]] = field(repr=False)


def _validate_encode(req: EncodeRequest) -> None:
    if req.kind not in ("image", "text"):
        raise ValueError(f"encode kind must be 'image' or 'text', got {req.kind!r}")
    if not req.items:
        raise ValueError("encode needs at least one item")
    if req.kind == "text" and not 1 <= req.max_tokens <= CLIP_MAX_TOKENS:
        raise ValueError(f"max_tokens must lie in 1..{CLIP_MAX_TOKENS}")


def _post(cfg: ClientConfig, route: str, body: dict) -> dict:
    url = cfg.endpoint.rstrip("/") + route
    headers = {"Authorization": f"Bearer {cfg.token}"} if cfg.token else {}
    last: Exception | None = None
    for attempt in range(cfg.max_retries + 1):
        if attempt:
            time.sleep(cfg.backoff)
        try:
            resp = requests.post(url, json=body, headers=headers, timeout=cfg.timeout)
        except requests.Timeout as exc:
            last = exc
            log.warning("%s timed out (attempt %d)", url, attempt + 1)
            continue
        except requests.ConnectionError as exc:
            last = exc
            log.warning("%s unreachable (attempt %d): %s", url, attempt + 1, exc)
            continue
        if resp.status_code != 200:
            raise BadResponse(f"{url} returned HTTP {resp.status_code}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise BadResponse(f"{url} returned malformed JSON") from exc
        if not isinstance(data, dict):
            raise BadResponse(f"{url} returned a non-object JSON body")
        return data
    if isinstance(last, requests.Timeout):
        raise Timeout(f"{url} timed out after {cfg.max_retries + 1} attempts")
    raise Exhausted(f"{url} failed after {cfg.max_retries + 1} attempts: {last}")


def caption(cfg: ClientConfig, req: CaptionRequest) -> CaptionResponse:
    data = _post(cfg, "/caption", asdict(req))
    text = data.get("caption")
    if not isinstance(text, str) or not text.strip():
        raise BadResponse("caption response lacks a nonempty 'caption'")
    return CaptionResponse(text)


def generate(cfg: ClientConfig, req: GenerateRequest) -> GenerateResponse:
    data = _post(cfg, "/generate", {"prompt": req.prompt, "seed": int(req.seed)})
    ref = data.get("image_ref")
    if not isinstance(ref, str) or not ref:
        raise BadResponse("generate response lacks 'image_ref'")
    return GenerateResponse(ref)


def encode(cfg: ClientConfig, req: EncodeRequest) -> EncodeResponse:
    _validate_encode(req)
    data = _post(cfg, "/encode", asdict(req))
    try:
        dim = int(data["dim"])
        rows = [[float(v) for v in row] for row in data["rows"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise BadResponse("encode response lacks 'dim'/'rows'") from exc
    if dim == 0:
        raise DimZero("encoder reported dim 0")
    if len(rows) != len(req.items) or any(len(r) != dim for r in rows):
        raise BadResponse("encode response rows do not match the request")
    return EncodeResponse(dim, rows)


class ModelClients(Protocol):
    def caption(self, req: CaptionRequest) -> CaptionResponse: ...
    def generate(self, req: GenerateRequest) -> GenerateResponse: ...
    def encode(self, req: EncodeRequest) -> EncodeResponse: ...


@dataclass
class HttpClients:
    captioner: ClientConfig
    generator: ClientConfig
    encoder: ClientConfig

    @classmethod
    def from_env(cls, defaults: dict[str, str | None] | None = None, **cfg_kwargs) -> "HttpClients":
        """Endpoints from ``CAPS_*_URL`` environment variables, falling back to ``defaults``."""
        defaults = defaults or {}
        cfgs = {}
        for service, var in ENV_URLS.items():
            url = os.environ.get(var) or defaults.get(service)
            if not url:
                raise ValueError(f"no endpoint for {service}: set {var}")
            cfgs[service] = ClientConfig(url, **cfg_kwargs)
        return cls(cfgs["caption"], cfgs["generate"], cfgs["encode"])

    def caption(self, req):
        return caption(self.captioner, req)

    def generate(self, req):
        return generate(self.generator, req)

    def encode(self, req):
        return encode(self.encoder, req)


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _MASK64
    return h


class SplitMix64:
    """Portable 64-bit generator; identical streams on every platform."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform in (0, 1)."""
        return ((self.next_u64() >> 11) + 0.5) / float(1 << 53)

    def normals(self, n: int) -> list[float]:
        out: list[float] = []
        while len(out) < n:
            u1, u2 = self.uniform(), self.uniform()
            r = math.sqrt(-2.0 * math.log(u1))
            out.append(r * math.cos(2.0 * math.pi * u2))
            out.append(r * math.sin(2.0 * math.pi * u2))
        return out[:n]


_STUB_WORDS = tuple(f"token-{c}" for c in "abcdefghijklmnop")


@dataclass
class StubClients:
    """Deterministic in-process stand-ins for the three services."""

    seed: int = 0
    dim: int = STUB_DIM

    def _key(self, *parts: bytes) -> int:
        return fnv1a64(b"\x00".join(parts) + struct.pack("<Q", self.seed & _MASK64))

    def caption(self, req: CaptionRequest) -> CaptionResponse:
        rng = SplitMix64(self._key(b"caption", req.image_ref.encode()))
        words = [_STUB_WORDS[rng.next_u64() % len(_STUB_WORDS)] for _ in range(2)]
        return CaptionResponse(f"stub caption for {req.image_ref} {' '.join(words)}")

    def generate(self, req: GenerateRequest) -> GenerateResponse:
        digest = fnv1a64(req.prompt.encode() + struct.pack("<Q", int(req.seed) & _MASK64))
        return GenerateResponse(f"gen:{digest:016x}")

    def encode(self, req: EncodeRequest) -> EncodeResponse:
        _validate_encode(req)
        if self.dim < 1:
            raise DimZero("stub dim must be positive")
        rows = []
        # max_tokens only shapes text embeddings
        tokens = str(req.max_tokens).encode() if req.kind == "text" else b""
        for item in req.items:
            rng = SplitMix64(self._key(req.kind.encode(), item.encode(), tokens))
            v = rng.normals(self.dim)
            norm = math.sqrt(sum(x * x for x in v))
            rows.append([x / norm for x in v])
        return EncodeResponse(self.dim, rows)
