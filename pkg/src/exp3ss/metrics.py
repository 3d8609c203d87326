"""Tokenization, the binary word-overlap reward, and query embeddings.

A recommendation earns reward 1 exactly when it shares more than half of its
words with the observed query, measured by the Dice coefficient over token
sets:

    dice(P, O) = 2 |P & O| / (|P| + |O|)

Embeddings are sums of word vectors; word vectors are sums of signed,
feature-hashed character n-gram contributions, so the whole pipeline is
deterministic for a fixed (dim, seed) pair and needs no trained weights.
A loader for plain-text pretrained vectors offers a drop-in alternative.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from hashlib import blake2b
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)

OVERLAP_COEFFICIENTS = ("dice", "precision", "recall")

MIN_EMBEDDING_DIM = 8
_NGRAM_MIN = 3
_NGRAM_MAX = 6


def split_words(text: str) -> list[str]:
    """Lowercase ``text`` and split it on runs of non-alphanumeric characters.

    Empty pieces are dropped, so the result contains only non-empty tokens.
    """
    return _WORD_RE.findall(text.lower())


def tokenize(text: str) -> set[str]:
    """Return the set of word tokens in ``text``."""
    return set(split_words(text))


def normalize_query(text: str) -> str:
    """Canonical form of a query: lowercased tokens joined by single spaces.

    Idempotent; two queries with the same token sequence normalize to the
    same string, which is what candidate identity is keyed on.
    """
    return " ".join(split_words(text))


def overlap_ratio(
    predicted: str,
    observed: str,
    *,
    coefficient: str = "dice",
    multiset: bool = False,
) -> float:
    """Word-overlap ratio between two queries, in [0, 1].

    ``coefficient`` selects the normalization: ``dice`` (symmetric),
    ``precision`` (overlap relative to the prediction) or ``recall``
    (relative to the observation).  With ``multiset`` the ratio counts
    repeated words instead of collapsing them into a set.  Either side
    tokenizing to nothing yields 0.
    """
    if coefficient not in OVERLAP_COEFFICIENTS:
        raise ConfigurationError(
            f"unknown overlap coefficient {coefficient!r}; expected one of {OVERLAP_COEFFICIENTS}"
        )
    if multiset:
        pred: Counter[str] | set[str] = Counter(split_words(predicted))
        obs: Counter[str] | set[str] = Counter(split_words(observed))
        n_pred = sum(pred.values())
        n_obs = sum(obs.values())
        n_common = sum((pred & obs).values())
    else:
        pred = tokenize(predicted)
        obs = tokenize(observed)
        n_pred = len(pred)
        n_obs = len(obs)
        n_common = len(pred & obs)
    if n_pred == 0 or n_obs == 0:
        return 0.0
    if coefficient == "dice":
        return 2.0 * n_common / (n_pred + n_obs)
    if coefficient == "precision":
        return n_common / n_pred
    return n_common / n_obs


def overlap_reward(
    predicted: str,
    observed: str,
    *,
    coefficient: str = "dice",
    strict: bool = True,
    multiset: bool = False,
) -> int:
    """Binary reward: 1 when the overlap ratio clears one half, else 0.

    ``strict`` demands ratio > 0.5; otherwise ratio >= 0.5 suffices.
    """
    ratio = overlap_ratio(predicted, observed, coefficient=coefficient, multiset=multiset)
    if strict:
        return int(ratio > 0.5)
    return int(ratio >= 0.5)


@dataclass(frozen=True)
class RewardRule:
    """A configured overlap reward, serializable into run metadata."""

    coefficient: str = "dice"
    strict: bool = True
    multiset: bool = False

    def __post_init__(self) -> None:
        if self.coefficient not in OVERLAP_COEFFICIENTS:
            raise ConfigurationError(
                f"unknown overlap coefficient {self.coefficient!r}; "
                f"expected one of {OVERLAP_COEFFICIENTS}"
            )

    def score(self, predicted: str, observed: str) -> int:
        return overlap_reward(
            predicted,
            observed,
            coefficient=self.coefficient,
            strict=self.strict,
            multiset=self.multiset,
        )

    def describe(self) -> dict:
        return {
            "coefficient": self.coefficient,
            "strict": self.strict,
            "multiset": self.multiset,
        }


@dataclass(frozen=True)
class QueryEmbedding:
    """A dense query vector with its Euclidean norm cached."""

    vector: np.ndarray
    norm: float

    @classmethod
    def of(cls, vector: np.ndarray) -> "QueryEmbedding":
        return cls(vector=vector, norm=float(np.linalg.norm(vector)))

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


class HashEmbedder:
    """Feature-hashed character n-gram embeddings.

    Each word is wrapped in boundary markers and decomposed into character
    n-grams of length 3 to 6; every n-gram lands in one of ``dim`` buckets
    with a +1 or -1 contribution decided by a keyed hash, the word vector
    is the sum of its n-gram contributions, and a query vector is the sum
    of its word vectors.  Identical (query, dim, seed) triples therefore
    produce identical vectors on any platform.
    """

    def __init__(self, dim: int = 128, seed: int = 42):
        if dim < MIN_EMBEDDING_DIM:
            raise ConfigurationError(f"embedding dim must be >= {MIN_EMBEDDING_DIM}, got {dim}")
        self.dim = int(dim)
        self.seed = int(seed)
        self._key = (self.seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
        self._word_cache: dict[str, np.ndarray] = {}
        self._query_cache: dict[str, QueryEmbedding] = {}

    def _bucket_and_sign(self, ngram: str) -> tuple[int, int]:
        digest = blake2b(ngram.encode("utf-8"), key=self._key, digest_size=8).digest()
        value = int.from_bytes(digest, "little")
        sign = 1 if value & 1 else -1
        return (value >> 1) % self.dim, sign

    def word_vector(self, word: str) -> np.ndarray:
        cached = self._word_cache.get(word)
        if cached is not None:
            return cached
        vec = np.zeros(self.dim)
        wrapped = f"<{word}>"
        for n in range(_NGRAM_MIN, _NGRAM_MAX + 1):
            for start in range(len(wrapped) - n + 1):
                bucket, sign = self._bucket_and_sign(wrapped[start : start + n])
                vec[bucket] += sign
        self._word_cache[word] = vec
        return vec

    def embed(self, query: str) -> QueryEmbedding:
        cached = self._query_cache.get(query)
        if cached is not None:
            return cached
        vec = np.zeros(self.dim)
        for word in split_words(query):
            vec = vec + self.word_vector(word)
        emb = QueryEmbedding.of(vec)
        self._query_cache[query] = emb
        return emb

    def describe(self) -> dict:
        return {"kind": "hash", "dim": self.dim, "seed": self.seed}


def load_word_vectors(path: str) -> tuple[dict[str, np.ndarray], int]:
    """Parse a plain-text vector file: one ``word v1 ... vD`` row per line.

    An optional first line ``COUNT DIM`` declares the table shape and is
    validated against the body.  Any malformed row raises ``DataError``
    with its line number.
    """
    vectors: dict[str, np.ndarray] = {}
    declared_count: int | None = None
    declared_dim: int | None = None
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                raise DataError("blank line in vector file", line=lineno)
            parts = line.split()
            if lineno == 1 and len(parts) == 2:
                try:
                    declared_count = int(parts[0])
                    declared_dim = int(parts[1])
                except ValueError:
                    raise DataError("malformed header; expected two integers", line=lineno)
                if declared_count <= 0 or declared_dim <= 0:
                    raise DataError("header counts must be positive", line=lineno)
                continue
            if len(parts) < 2:
                raise DataError("expected a word followed by vector components", line=lineno)
            word, components = parts[0], parts[1:]
            try:
                values = np.array([float(c) for c in components])
            except ValueError:
                raise DataError(f"non-numeric vector component for word {word!r}", line=lineno)
            if dim is None:
                dim = len(values)
                if declared_dim is not None and dim != declared_dim:
                    raise DataError(
                        f"vector has {dim} components but header declared {declared_dim}",
                        line=lineno,
                    )
            elif len(values) != dim:
                raise DataError(
                    f"vector has {len(values)} components, expected {dim}", line=lineno
                )
            if word in vectors:
                raise DataError(f"duplicate word {word!r}", line=lineno)
            vectors[word] = values
    if not vectors:
        raise DataError("vector file contains no vectors")
    if declared_count is not None and declared_count != len(vectors):
        raise DataError(
            f"header declared {declared_count} vectors but file contains {len(vectors)}"
        )
    assert dim is not None
    return vectors, dim


class PretrainedEmbedder:
    """Query embeddings backed by a loaded word-vector table.

    Words absent from the table contribute a zero vector, so queries made of
    unknown words embed to zero and score 0 cosine similarity by convention.
    """

    def __init__(self, vectors: dict[str, np.ndarray], dim: int, *, source: str = ""):
        if dim < 1:
            raise ConfigurationError(f"embedding dim must be positive, got {dim}")
        self.dim = int(dim)
        self.source = source
        self._vectors = vectors
        self._zero = np.zeros(self.dim)
        self._query_cache: dict[str, QueryEmbedding] = {}

    @classmethod
    def from_file(cls, path: str) -> "PretrainedEmbedder":
        vectors, dim = load_word_vectors(path)
        return cls(vectors, dim, source=path)

    def word_vector(self, word: str) -> np.ndarray:
        return self._vectors.get(word, self._zero)

    def embed(self, query: str) -> QueryEmbedding:
        cached = self._query_cache.get(query)
        if cached is not None:
            return cached
        vec = np.zeros(self.dim)
        for word in split_words(query):
            vec = vec + self.word_vector(word)
        emb = QueryEmbedding.of(vec)
        self._query_cache[query] = emb
        return emb

    def describe(self) -> dict:
        return {"kind": "pretrained", "dim": self.dim, "source": self.source}


def cosine_similarity(a: QueryEmbedding, b: QueryEmbedding) -> float:
    """Cosine of the angle between two embeddings; 0 if either has zero norm."""
    if a.dim != b.dim:
        raise ConfigurationError(f"embedding dims differ: {a.dim} vs {b.dim}")
    if a.norm == 0.0 or b.norm == 0.0:
        return 0.0
    return float(np.dot(a.vector, b.vector) / (a.norm * b.norm))


def euclidean_distance(a: QueryEmbedding, b: QueryEmbedding) -> float:
    if a.dim != b.dim:
        raise ConfigurationError(f"embedding dims differ: {a.dim} vs {b.dim}")
    return float(np.linalg.norm(a.vector - b.vector))


def context_similarity(
    predicted: str,
    context_queries: Iterable[str],
    embedder,
) -> tuple[float, float]:
    """Mean cosine similarity and mean Euclidean distance of ``predicted``
    against each query in the context, in context order."""
    queries: Sequence[str] = list(context_queries)
    if not queries:
        raise ConfigurationError("context must contain at least one query")
    pred = embedder.embed(predicted)
    cosines = []
    distances = []
    for query in queries:
        emb = embedder.embed(query)
        cosines.append(cosine_similarity(pred, emb))
        distances.append(euclidean_distance(pred, emb))
    return float(math.fsum(cosines) / len(queries)), float(math.fsum(distances) / len(queries))
