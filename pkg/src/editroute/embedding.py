from __future__ import annotations

import hashlib
from typing import Protocol, runtime_checkable

import httpx
import numpy as np

from .errors import EmbeddingError


@runtime_checkable
class EmbeddingBackend(Protocol):
    name: str
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


def l2_normalize(vector: np.ndarray) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if not np.isfinite(norm) or norm == 0.0:
        raise EmbeddingError("cannot normalize a zero or non-finite embedding")
    return vector / norm


class NgramEmbedder:
    """Hashed character 3-gram counts, L2-normalized.

    Texts sharing many 3-grams get high cosine similarity, which is all the
    offline tests need from an embedder. Deterministic across processes
    (no use of the salted builtin ``hash``).
    """

    def __init__(self, dimension: int = 256, n: int = 3) -> None:
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.n = n
        self.name = f"ngram{n}-{dimension}"

    def _bucket(self, gram: str) -> int:
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dimension

    def embed(self, text: str) -> np.ndarray:
        padded = f" {' '.join(text.lower().split())} "
        vec = np.zeros(self.dimension, dtype=np.float64)
        if len(padded.strip()) == 0:
            raise EmbeddingError("cannot embed empty text")
        for i in range(max(1, len(padded) - self.n + 1)):
            vec[self._bucket(padded[i : i + self.n])] += 1.0
        return l2_normalize(vec)


class HttpEmbedder:
    """Client for an OpenAI-style ``POST {base_url}/embeddings`` endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        dimension: int,
        timeout: float = 30.0,
        retries: int = 2,
        client: httpx.Client | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dimension = dimension
        self.timeout = timeout
        self.retries = retries
        self.name = f"http:{model}"
        self._client = client or httpx.Client(timeout=timeout)

    def embed(self, text: str) -> np.ndarray:
        payload = {"model": self.model, "input": [text]}
        last: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                response = self._client.post(f"{self.base_url}/embeddings", json=payload)
                response.raise_for_status()
                vector = np.asarray(response.json()["data"][0]["embedding"], dtype=np.float64)
                break
            except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
                last = exc
        else:
            raise EmbeddingError(f"embedding request failed: {last}")
        if vector.shape != (self.dimension,):
            raise EmbeddingError(f"expected dimension {self.dimension}, got {vector.shape}")
        return vector
