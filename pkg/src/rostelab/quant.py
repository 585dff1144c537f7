"""Group-wise uniform quantizers with exact dequantization.

Symmetric mode maps a group onto signed codes in [-2^(b-1), 2^(b-1)-1]
with scale c*max|X|/(2^(b-1)-1) and zero-point 0; asymmetric mode maps
onto unsigned codes in [0, 2^b-1] with scale c*(max-min)/(2^b-1) and a
rounded integer zero-point. Rounding is half-away-from-zero everywhere.
The clipping factor c shrinks the scale only; values beyond the clipped
range saturate through the clamp.

Grouping is either one group for the whole tensor or one group per row
(rows are tokens for activations, output channels for weights).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .numkit import check_finite

__all__ = [
    "QuantSpec",
    "QuantizedTensor",
    "quantize",
    "dequantize",
    "fake_quantize",
    "quant_error_sq",
    "round_half_away",
]


@dataclass(frozen=True)
class QuantSpec:
    """Quantizer hyperparameters: bit-width, symmetry, clipping, grouping."""

    bits: int = 4
    mode: str = "symmetric"  # symmetric | asymmetric
    clip: float = 1.0
    grouping: str = "per_tensor"  # per_tensor | per_row

    def __post_init__(self):
        if not (2 <= self.bits <= 16):
            raise DomainError(f"bits must be in [2, 16], got {self.bits}")
        if self.mode not in ("symmetric", "asymmetric"):
            raise DomainError(f"unknown mode {self.mode!r}")
        if not (0.0 < self.clip <= 1.0):
            raise DomainError(f"clip must be in (0, 1], got {self.clip}")
        if self.grouping not in ("per_tensor", "per_row"):
            raise DomainError(f"unknown grouping {self.grouping!r}")


@dataclass
class QuantizedTensor:
    """Integer codes plus per-group scale/zero-point.

    ``group_const`` carries the group value for degenerate groups
    (scale 0): all-zero groups in symmetric mode, constant groups in
    asymmetric mode. It is zero everywhere else.
    """

    codes: np.ndarray       # int64, same shape as the source
    scale: np.ndarray       # float64, one entry per group
    zero_point: np.ndarray  # int64, one entry per group
    spec: QuantSpec
    group_const: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.group_const is None:
            self.group_const = np.zeros_like(self.scale)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Nearest rounding with halves going away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _group_view(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    # One group per output row; per_tensor flattens to a single row.
    if spec.grouping == "per_tensor":
        return x.reshape(1, -1)
    return x


def quantize(x: np.ndarray, spec: QuantSpec) -> QuantizedTensor:
    x = np.asarray(x, dtype=np.float64)
    check_finite(x)
    shape = x.shape
    g = _group_view(np.atleast_2d(x), spec)

    if spec.mode == "symmetric":
        qmax = float(2 ** (spec.bits - 1) - 1)
        qmin = -float(2 ** (spec.bits - 1))
        absmax = np.max(np.abs(g), axis=1)
        scale = spec.clip * absmax / qmax
        zero = np.zeros(g.shape[0], dtype=np.int64)
        const = np.zeros(g.shape[0])
        safe = np.where(scale > 0.0, scale, 1.0)
        codes = np.clip(round_half_away(g / safe[:, None]), qmin, qmax)
        codes[scale == 0.0] = 0.0
    else:
        qmax = float(2**spec.bits - 1)
        qmin = 0.0
        lo = np.min(g, axis=1)
        hi = np.max(g, axis=1)
        scale = spec.clip * (hi - lo) / qmax
        safe = np.where(scale > 0.0, scale, 1.0)
        zero = round_half_away(-lo / safe).astype(np.int64)
        zero[scale == 0.0] = 0
        const = np.where(scale == 0.0, lo, 0.0)
        codes = np.clip(round_half_away(g / safe[:, None]) + zero[:, None], qmin, qmax)
        codes[scale == 0.0] = 0.0

    return QuantizedTensor(
        codes=codes.astype(np.int64).reshape(shape),
        scale=scale,
        zero_point=zero,
        spec=spec,
        group_const=const,
    )


def dequantize(q: QuantizedTensor) -> np.ndarray:
    shape = q.codes.shape
    g = _group_view(np.atleast_2d(q.codes.astype(np.float64)), q.spec)
    out = (g - q.zero_point[:, None].astype(np.float64)) * q.scale[:, None]
    degenerate = q.scale == 0.0
    if np.any(degenerate):
        out[degenerate] = q.group_const[degenerate, None]
    return out.reshape(shape)


def fake_quantize(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Quantize-dequantize composite used throughout training."""
    return dequantize(quantize(x, spec))


def quant_error_sq(x: np.ndarray, spec: QuantSpec) -> float:
    """Squared Frobenius norm of the fake-quantization residual."""
    x = np.asarray(x, dtype=np.float64)
    check_finite(x)
    r = fake_quantize(x, spec) - x
    return float(np.sum(r * r))
