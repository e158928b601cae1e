"""Text feature providers standing in for a frozen CLIP text encoder.

The toy encoder is a hashed bag of tokens:

* lowercase, then split into maximal runs of letters/digits
  (regex ``[^\\W_]+``); everything else separates tokens
* each token is hashed with 32-bit FNV-1a over its UTF-8 bytes, modulo
  ``VOCAB_SIZE`` (4096), to pick a row of a fixed embedding table
* the table is ``numpy.random.default_rng(TABLE_SEED).standard_normal``
  of shape (4096, D), computed once per D
* sequences are truncated to ``MAX_TOKENS`` (32) and padded with zero
  rows; an empty prompt is a single pad row (``tokens_len == 1``)
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .checkpoint import load_tensors, save_tensors

VOCAB_SIZE = 4096
MAX_TOKENS = 32
D_TEXT = 64
TABLE_SEED = 20240517

_TOKEN_RE = re.compile(r"[^\W_]+")


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class TextFeatures:
    features: np.ndarray  # (MAX_TOKENS, D) padded
    tokens_len: int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float32)
        if f.ndim != 2:
            raise FeatureError(f"features must be rank 2, got shape {f.shape}")
        if not 1 <= self.tokens_len <= f.shape[0]:
            raise FeatureError(f"tokens_len {self.tokens_len} outside [1, {f.shape[0]}]")
        if not np.all(np.isfinite(f)):
            raise FeatureError("features must be finite")
        object.__setattr__(self, "features", f)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def mask(self) -> np.ndarray:
        m = np.zeros(self.features.shape[0], dtype=bool)
        m[: self.tokens_len] = True
        return m


def tokenize(prompt: str) -> list[str]:
    return _TOKEN_RE.findall(prompt.lower())


def fnv1a_32(data: bytes) -> int:
    h = 0x811C9DC5
    for b in data:
        h ^= b
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def token_id(token: str) -> int:
    return fnv1a_32(token.encode("utf-8")) % VOCAB_SIZE


@lru_cache(maxsize=8)
def embedding_table(dim: int = D_TEXT) -> np.ndarray:
    table = np.random.default_rng(TABLE_SEED).standard_normal((VOCAB_SIZE, dim)).astype(np.float32)
    table.flags.writeable = False
    return table


def encode_toy(prompt: str, dim: int = D_TEXT) -> TextFeatures:
    ids = [token_id(t) for t in tokenize(prompt)][:MAX_TOKENS]
    feats = np.zeros((MAX_TOKENS, dim), dtype=np.float32)
    if ids:
        feats[: len(ids)] = embedding_table(dim)[ids]
    return TextFeatures(feats, max(1, len(ids)))


def stack(feats: list[TextFeatures]) -> tuple[np.ndarray, np.ndarray]:
    """Batch features into (B, L, D) plus a (B, L) validity mask."""
    return np.stack([f.features for f in feats]), np.stack([f.mask() for f in feats])


def save_features(feats: TextFeatures, path) -> None:
    save_tensors(path, {"features": feats.features[: feats.tokens_len]})


def load_features(path, expected_dim: int | None = None) -> TextFeatures:
    """Load a (tokens, D) matrix stored under the name ``features``.

    Longer sequences are truncated to MAX_TOKENS; shorter ones are
    zero-padded.
    """
    tensors = load_tensors(path)
    if "features" not in tensors:
        raise FeatureError(f"{path}: no tensor named 'features' (found {sorted(tensors)})")
    f = tensors["features"]
    if f.ndim != 2:
        raise FeatureError(f"{path}: 'features' must be rank 2, got rank {f.ndim}")
    if expected_dim is not None and f.shape[1] != expected_dim:
        raise FeatureError(f"feature dim {f.shape[1]} does not match model d_text {expected_dim}")
    n = min(max(f.shape[0], 1), MAX_TOKENS)
    padded = np.zeros((MAX_TOKENS, f.shape[1]), dtype=np.float32)
    padded[: min(f.shape[0], MAX_TOKENS)] = f[:MAX_TOKENS]
    return TextFeatures(padded, n)
