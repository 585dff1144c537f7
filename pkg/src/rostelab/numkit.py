"""Dense numeric substrate: float64 matrices and seeded random streams.

Matrices are plain ``numpy.ndarray`` values with dtype float64; every
public operation validates shapes and finiteness instead of silently
propagating NaN/Inf. Randomness goes through :class:`Rng`, a thin wrapper
over numpy's PCG64 generator keyed by ``(seed, stream_id)`` so that
independent substreams are reproducible across runs and platforms.
Normal variates use numpy's ziggurat implementation of the standard
normal (fixed by pinning the PCG64 bit generator).
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import DomainError, ShapeError

__all__ = ["Rng", "as_matrix", "matmul", "gaussian", "rademacher", "check_finite"]


def _stream_entropy(stream_id) -> int:
    """Map an arbitrary stream label to a stable 64-bit integer."""
    if isinstance(stream_id, (int, np.integer)):
        return int(stream_id) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(stream_id).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Deterministic random stream keyed by (seed, stream_id).

    Two Rng instances built with equal keys produce bitwise-identical
    sequences. Substreams with distinct stream_ids are statistically
    independent (distinct PCG64 seed sequences).
    """

    def __init__(self, seed: int, stream_id=0):
        self.seed = int(seed)
        self.stream_id = stream_id
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, _stream_entropy(stream_id)])
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def substream(self, stream_id) -> "Rng":
        """Fresh independent stream derived from the same root seed."""
        return Rng(self.seed, f"{self.stream_id}/{stream_id}")

    def state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state


def as_matrix(data) -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    check_finite(m)
    return m


def check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise DomainError("matrix contains NaN or Inf entries")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit inner-dimension validation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul requires 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def gaussian(rng: Rng, rows: int, cols: int) -> np.ndarray:
    """i.i.d. standard normal matrix (ziggurat via numpy PCG64)."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"gaussian requires positive shape, got {rows}x{cols}")
    return rng.gen.standard_normal((rows, cols), dtype=np.float64)


def rademacher(rng: Rng, d: int) -> np.ndarray:
    """Random sign vector: each entry is +1 or -1 with probability 1/2."""
    if d < 1:
        raise ShapeError(f"rademacher requires d >= 1, got {d}")
    return rng.gen.integers(0, 2, size=d).astype(np.float64) * 2.0 - 1.0
