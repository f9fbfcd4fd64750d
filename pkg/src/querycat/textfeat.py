"""Text normalization and hashed sparse features for embedding-bag encoders.

Two channels: character trigrams (with ``^``/``$`` word-boundary markers)
and whole-word tokens.  Both hash with seeded 64-bit FNV-1a so that the
same text and config always yield the same feature ids, on any platform.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass

_FNV64_OFFSET = 0xCBF29CE484222325
_FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class FeatureConfig:
    """Hash-space sizes and seed shared by all encoders of one model."""

    trigram_buckets: int = 1_000_000
    word_buckets: int = 250_000
    hash_seed: int = 0
    boundary_markers: bool = True

    def __post_init__(self) -> None:
        if self.trigram_buckets <= 0 or self.word_buckets <= 0:
            raise ValueError("bucket counts must be positive")


@dataclass
class FeatureBag:
    """Hashed feature ids with multiplicity for one channel of one text."""

    ids: list[int]
    channel: str  # "trigram" | "word"


def normalize(text: str) -> str:
    """Lowercased NFKC text with runs of whitespace collapsed to one space."""
    folded = unicodedata.normalize("NFKC", text).lower()
    return " ".join(folded.split())


def fnv1a64(data: bytes, seed: int = 0) -> int:
    """Seeded 64-bit FNV-1a; the seed bytes are hashed ahead of the data."""
    h = _FNV64_OFFSET
    for b in (seed & _MASK64).to_bytes(8, "little") + data:
        h = ((h ^ b) * _FNV64_PRIME) & _MASK64
    return h


def _hash_token(token: str, buckets: int, seed: int) -> int:
    return fnv1a64(token.encode("utf-8"), seed) % buckets


def trigram_features(text: str, config: FeatureConfig) -> FeatureBag:
    """Character trigrams of each word, hashed into the trigram space.

    With boundary markers enabled, each word ``w`` is framed as ``^w$``
    before windowing, so e.g. ``boat`` yields ``^bo boa oat at$``.  Words
    too short to fill one window yield nothing.  Multiplicity is kept.
    """
    ids: list[int] = []
    for word in text.split():
        framed = f"^{word}$" if config.boundary_markers else word
        for i in range(len(framed) - 2):
            ids.append(_hash_token(framed[i : i + 3], config.trigram_buckets, config.hash_seed))
    return FeatureBag(ids, "trigram")


def word_features(text: str, config: FeatureConfig) -> FeatureBag:
    """One hashed id per whitespace token, multiplicity kept."""
    ids = [_hash_token(w, config.word_buckets, config.hash_seed) for w in text.split()]
    return FeatureBag(ids, "word")
