"""Text encoders and cosine similarity."""

from __future__ import annotations

import hashlib
import math
import re
import threading
from dataclasses import dataclass
from typing import Protocol, Sequence

import httpx
import numpy as np

_TOKEN = re.compile(r"[^\W_]+")


class EmptyText(ValueError):
    pass


class DimMismatch(ValueError):
    pass


class ZeroVector(ValueError):
    pass


class EncoderUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise ValueError("embedding must have at least one coordinate")

    @property
    def dim(self) -> int:
        return len(self.values)

    @classmethod
    def of(cls, values: Sequence[float]) -> "EmbeddingVector":
        return cls(tuple(float(v) for v in values))


class Encoder(Protocol):
    dim: int | None

    def encode(self, text: str) -> EmbeddingVector: ...


def _tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.casefold())


class HashingEncoder:
    """Bag-of-words feature hashing into ``dim`` buckets, L2-normalized.

    Offline and deterministic; stands in for a pre-trained sentence encoder.
    """

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._cache: dict[str, EmbeddingVector] = {}
        self._lock = threading.Lock()

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dim

    def encode(self, text: str) -> EmbeddingVector:
        if not text or not text.strip():
            raise EmptyText("cannot encode empty text")
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        # punctuation-only text still gets a vector
        tokens = _tokens(text) or [text.strip()]
        counts = np.zeros(self.dim)
        for tok in tokens:
            counts[self.bucket(tok)] += 1.0
        vec = EmbeddingVector.of(counts / np.linalg.norm(counts))
        with self._lock:
            self._cache[text] = vec
        return vec


class RemoteEncoder:
    """Embedding endpoint taking ``{"model", "input"}`` and returning a vector."""

    def __init__(self, url: str, model: str, *, api_key: str | None = None,
                 timeout_s: float = 30.0, client: httpx.Client | None = None):
        self.url = url
        self.model = model
        self.dim: int | None = None
        self._api_key = api_key
        self._client = client or httpx.Client(timeout=timeout_s)

    def encode(self, text: str) -> EmbeddingVector:
        if not text or not text.strip():
            raise EmptyText("cannot encode empty text")
        headers = {"Authorization": f"Bearer {self._api_key}"} if self._api_key else {}
        try:
            resp = self._client.post(self.url, json={"model": self.model, "input": text}, headers=headers)
            resp.raise_for_status()
            values = _vector_from_payload(resp.json())
        except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
            raise EncoderUnavailable(f"embedding request to {self.url} failed: {exc}") from exc
        vec = EmbeddingVector.of(values)
        if self.dim is None:
            self.dim = vec.dim
        elif vec.dim != self.dim:
            raise EncoderUnavailable(f"endpoint returned dim {vec.dim}, expected {self.dim}")
        if not any(vec.values):
            raise EncoderUnavailable("endpoint returned an all-zero vector")
        return vec


def _vector_from_payload(payload) -> list[float]:
    # bare array is the contract; the OpenAI-style envelope is accepted too
    if isinstance(payload, dict):
        if "embedding" in payload:
            payload = payload["embedding"]
        else:
            payload = payload["data"][0]["embedding"]
    if payload and isinstance(payload[0], list):
        payload = payload[0]
    return [float(v) for v in payload]


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dim != b.dim:
        raise DimMismatch(f"dims differ: {a.dim} vs {b.dim}")
    va = np.asarray(a.values, dtype=np.float64)
    vb = np.asarray(b.values, dtype=np.float64)
    na = math.sqrt(float(va @ va))
    nb = math.sqrt(float(vb @ vb))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine undefined for an all-zero vector")
    value = float(va @ vb) / (na * nb)
    return min(1.0, max(-1.0, value))
