"""Stable softmax family, argmax and seeded randomness.

Every function accepts a single vector or a 2-D array of row vectors; the
reduction always runs over the last axis. All arithmetic is float64.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import InvalidArgument

__all__ = [
    "as_finite",
    "tempered_softmax",
    "softmax",
    "log_softmax",
    "argmax",
    "make_rng",
    "derive_seed",
]


def as_finite(z, name="input") -> np.ndarray:
    arr = np.asarray(z, dtype=np.float64)
    if arr.size == 0:
        raise InvalidArgument(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} contains non-finite values")
    return arr


def log_softmax(z) -> np.ndarray:
    """log(softmax(z)) via log-sum-exp with max subtraction."""
    z = as_finite(z, "logits")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def tempered_softmax(z, tau: float = 1.0) -> np.ndarray:
    """softmax(z / tau), stable for arbitrarily large logits."""
    if not (np.isfinite(tau) and tau > 0):
        raise InvalidArgument(f"temperature must be positive, got {tau}")
    z = as_finite(z, "logits") / tau
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax(z) -> np.ndarray:
    return tempered_softmax(z, 1.0)


def argmax(v) -> int | np.ndarray:
    """Index of the maximum; ties go to the lowest index.

    For a 2-D input the argmax of each row is returned.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0 or arr.shape[-1] == 0:
        raise InvalidArgument("argmax of an empty sequence")
    # np.argmax returns the first occurrence of the maximum
    idx = np.argmax(arr, axis=-1)
    return int(idx) if arr.ndim == 1 else idx


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; equal seeds give bit-identical streams on every platform."""
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise InvalidArgument(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, tag: str) -> int:
    """Stable 63-bit child seed for a named sub-task."""
    digest = hashlib.sha256(f"{int(seed)}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
