"""Deterministic hashed bag-of-tokens embeddings.

Tokens are lowercased runs of Unicode letters/digits. Each token is hashed
with XXH64 (seed 0) over its UTF-8 bytes and counted into bucket
``hash % dim``; the count vector is L2-normalised. Empty text maps to the
zero vector.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import xxhash

DEFAULT_DIM = 64
HASH_SEED = 0

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_bucket(token: str, dim: int = DEFAULT_DIM) -> int:
    return xxhash.xxh64_intdigest(token.encode("utf-8"), seed=HASH_SEED) % dim


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.values)

    def norm(self) -> float:
        return math.sqrt(sum(v * v for v in self.values))

    def is_zero(self) -> bool:
        return not any(self.values)

    @classmethod
    def zeros(cls, dim: int = DEFAULT_DIM) -> "EmbeddingVector":
        return cls((0.0,) * dim)

    def to_list(self) -> list[float]:
        return list(self.values)

    @classmethod
    def from_list(cls, values: Iterable[float]) -> "EmbeddingVector":
        return cls(tuple(float(v) for v in values))


def embed(text: str, dim: int = DEFAULT_DIM) -> EmbeddingVector:
    if dim < 1:
        raise ValueError(f"embedding dimension must be positive, got {dim}")
    counts = [0.0] * dim
    for token in tokenize(text):
        counts[token_bucket(token, dim)] += 1.0
    norm = math.sqrt(sum(c * c for c in counts))
    if norm == 0.0:
        return EmbeddingVector.zeros(dim)
    return EmbeddingVector(tuple(c / norm for c in counts))


def cosine(a: EmbeddingVector | Sequence[float], b: EmbeddingVector | Sequence[float]) -> float:
    """Cosine similarity, 0.0 if either vector has zero norm.

    Raises ValueError on a dimension mismatch.
    """
    av = a.values if isinstance(a, EmbeddingVector) else tuple(a)
    bv = b.values if isinstance(b, EmbeddingVector) else tuple(b)
    if len(av) != len(bv):
        raise ValueError(f"dimension mismatch: {len(av)} vs {len(bv)}")
    na = math.sqrt(sum(x * x for x in av))
    nb = math.sqrt(sum(y * y for y in bv))
    if na == 0.0 or nb == 0.0:
        return 0.0
    # Summation order fixed by index so cosine(a, b) == cosine(b, a) exactly.
    dot = math.fsum(x * y for x, y in zip(av, bv))
    value = dot / (na * nb)
    return max(-1.0, min(1.0, value))


def text_similarity(a: str, b: str, dim: int = DEFAULT_DIM) -> float:
    return cosine(embed(a, dim), embed(b, dim))
