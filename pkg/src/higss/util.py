"""Shared helpers: deterministic seeding, text-format numbers, log-space draws."""

from __future__ import annotations

import hashlib

import numpy as np
from numpy.random import Generator, PCG64, SeedSequence


class ValidationError(ValueError):
    """Input violates a documented precondition (CLI exit code 2)."""


class FormatError(ValidationError):
    """A file does not match its declared layout (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """A computation produced non-finite or unusable values (CLI exit code 3)."""


def _to_key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    # strings hash to a stable 64-bit key so seed paths can be labeled
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def child_rng(seed: int, *path) -> Generator:
    """Deterministic generator for a labeled sub-task of a master seed.

    The same (seed, path) always yields the same stream, independent of
    scheduling or worker count.
    """
    keys = tuple(_to_key(p) for p in path)
    return Generator(PCG64(SeedSequence((int(seed),) + keys)))


def child_seed(seed: int, *path) -> int:
    """Derived integer seed for a labeled sub-task; stable across runs."""
    keys = tuple(_to_key(p) for p in path)
    state = SeedSequence((int(seed),) + keys).generate_state(2, dtype=np.uint64)
    return int(state[0] ^ (state[1] >> 1))


def format_float(x: float) -> str:
    """Render a 64-bit real with 17 significant digits (exact round trip)."""
    return f"{float(x):.17g}"


def log_categorical(rng: Generator, log_weights: np.ndarray) -> int:
    """Draw an index from unnormalized log weights via Gumbel-free inverse CDF."""
    lw = np.asarray(log_weights, dtype=float)
    m = np.max(lw)
    if not np.isfinite(m):
        raise NumericalError("all categorical log-weights are -inf or non-finite")
    w = np.exp(lw - m)
    total = w.sum()
    u = rng.uniform(0.0, total)
    return int(np.searchsorted(np.cumsum(w), u, side="right").clip(0, len(w) - 1))


def normalized_weights(log_weights: np.ndarray) -> np.ndarray:
    """Exponentiate-and-normalize log weights; sums to 1 up to float rounding."""
    lw = np.asarray(log_weights, dtype=float)
    w = np.exp(lw - np.max(lw))
    return w / w.sum()


def logsumexp(log_weights: np.ndarray) -> float:
    lw = np.asarray(log_weights, dtype=float)
    m = np.max(lw)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(lw - m))))
