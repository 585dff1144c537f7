"""Randomized orthonormal Walsh-Hadamard rotations.

A rotation is either the identity or R = (1/sqrt(d)) * H_d * Diag(r)
where H_d is the Sylvester Hadamard matrix and r a seeded random sign
vector. The 1/sqrt(d) normalization is baked in so R R^T = I; the
unnormalized +-1 matrix is never exposed. ``fwht_apply`` computes the
two placements used by rotated linear layers (X R and R^T W) in
O(n d log d) via in-place butterfly passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UnsupportedDimensionError
from .numkit import Rng, rademacher
from .quant import QuantSpec, quant_error_sq

__all__ = [
    "RotationChoice",
    "derive_sign_seed",
    "materialize",
    "apply_rotation",
    "fwht_apply",
    "fwht_rows",
    "rotate_vec",
    "check_prop1",
    "Prop1Report",
]


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def derive_sign_seed(global_seed: int, layer_index: int) -> int:
    """Per-layer sign seed so layer rotations are independent but reproducible."""
    import hashlib

    h = hashlib.sha256(f"sign:{global_seed}:{layer_index}".encode()).digest()
    return int.from_bytes(h[:8], "little")


@dataclass(frozen=True)
class RotationChoice:
    """Per-layer rotation: identity or seeded random Hadamard of size dim."""

    kind: str  # identity | hadamard
    dim: int
    sign_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("identity", "hadamard"):
            raise UnsupportedDimensionError(f"unknown rotation kind {self.kind!r}")
        if self.kind == "hadamard" and (self.dim < 2 or not _is_pow2(self.dim)):
            raise UnsupportedDimensionError(
                f"hadamard rotation needs a power-of-two dim >= 2, got {self.dim}"
            )

    def signs(self) -> np.ndarray:
        if self.kind == "identity":
            return np.ones(self.dim)
        return rademacher(Rng(self.sign_seed, "signs"), self.dim)


def materialize(rc: RotationChoice) -> np.ndarray:
    """Dense rotation matrix: I_d, or (1/sqrt(d)) H_d Diag(r)."""
    if rc.kind == "identity":
        return np.eye(rc.dim)
    h = np.array([[1.0]])
    while h.shape[0] < rc.dim:
        h = np.block([[h, h], [h, -h]])
    return (h / math.sqrt(rc.dim)) * rc.signs()[None, :]


def fwht_rows(x: np.ndarray) -> np.ndarray:
    """Unnormalized fast Walsh-Hadamard transform of each row."""
    y = np.array(x, dtype=np.float64, copy=True)
    d = y.shape[-1]
    if not _is_pow2(d):
        raise UnsupportedDimensionError(f"FWHT length must be a power of two, got {d}")
    h = 1
    while h < d:
        y = y.reshape(-1, d // (2 * h), 2, h)
        a = y[:, :, 0, :] + y[:, :, 1, :]
        b = y[:, :, 0, :] - y[:, :, 1, :]
        y = np.stack((a, b), axis=2).reshape(-1, d)
        h *= 2
    return y.reshape(x.shape)


def apply_rotation(rc: RotationChoice, x: np.ndarray, op: str) -> np.ndarray:
    """Fast product with the rotation matrix R = (1/sqrt(d)) H Diag(r).

    op selects the placement: "XR" -> x @ R, "RT_W" -> R.T @ x,
    "X_RT" -> x @ R.T, "R_W" -> R @ x. All run in O(n d log d) and match
    the dense product with materialize(rc).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("apply_rotation expects a 2-D operand")
    if op not in ("XR", "RT_W", "X_RT", "R_W"):
        raise ShapeError(f"unknown op {op!r}")
    on_cols = op in ("XR", "X_RT")
    expect = x.shape[1] if on_cols else x.shape[0]
    if expect != rc.dim:
        raise ShapeError(f"operand dim {expect} != rotation dim {rc.dim}")
    if rc.kind == "identity":
        return x.copy()

    r = rc.signs()
    scale = 1.0 / math.sqrt(rc.dim)
    if op == "XR":
        # X H Diag(r); H symmetric, so XH is a row-wise FWHT.
        return fwht_rows(x) * (r * scale)[None, :]
    if op == "X_RT":
        # X Diag(r) H
        return fwht_rows(x * r[None, :]) * scale
    if op == "RT_W":
        # Diag(r) H X: column FWHT, then row signs.
        return fwht_rows(x.T).T * (r * scale)[:, None]
    # R_W: H Diag(r) X
    return fwht_rows((x * r[:, None]).T).T * scale


def fwht_apply(rc: RotationChoice, x: np.ndarray, side: str) -> np.ndarray:
    """Rotated-linear-layer placements: side 'right_XR' gives X R and
    side 'left_RT_W' gives R^T W."""
    if side == "right_XR":
        return apply_rotation(rc, x, "XR")
    if side == "left_RT_W":
        return apply_rotation(rc, x, "RT_W")
    raise ShapeError(f"unknown side {side!r}")


def rotate_vec(rc: RotationChoice, v: np.ndarray) -> np.ndarray:
    """Column action R v. For hadamard, R v = H (r*v) / sqrt(d): the sign
    diagonal hits the vector before the transform, which is what the
    probabilistic error bound requires."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != rc.dim:
        raise ShapeError(f"vector dim {v.shape[0]} != rotation dim {rc.dim}")
    if rc.kind == "identity":
        return v.copy()
    return fwht_rows((rc.signs() * v).reshape(1, -1)).reshape(-1) / math.sqrt(rc.dim)


@dataclass
class Prop1Report:
    """Outcome of the deterministic and probabilistic rotation-error checks."""

    d: int
    b_w: int
    trials: int
    delta: float
    identity_bound_violations: int
    rotated_bound_violation_frac: float
    mean_err_identity: float
    mean_err_rotated: float


def check_prop1(
    d: int,
    b_w: int,
    trials: int,
    delta: float,
    rng: Rng,
    w_generator: str = "gaussian",
) -> Prop1Report:
    """Monte-Carlo check of the rotation quantization-error bounds.

    For each trial draws w (gaussian, or gaussian with one coordinate
    scaled by 10 for 'outlier'), checks the deterministic unrotated bound
    d*max_i w_i^2 / (4 (2^(b_w-1)-1)^2), then rotates with a fresh sign
    seed and checks the high-probability bound
    log(4d/delta) / (2 (2^(b_w-1)-1)^2) * ||w||^2.
    """
    if not _is_pow2(d):
        raise UnsupportedDimensionError(f"d must be a power of two, got {d}")
    if trials < 1:
        raise ShapeError("trials must be >= 1")
    if not (0.0 < delta < 1.0):
        raise ShapeError("delta must be in (0, 1)")

    spec = QuantSpec(bits=b_w, mode="symmetric", clip=1.0, grouping="per_tensor")
    qden = float(2 ** (b_w - 1) - 1) ** 2
    rot_factor = math.log(4.0 * d / delta) / (2.0 * qden)

    id_violations = 0
    rot_violations = 0
    sum_id = 0.0
    sum_rot = 0.0
    for t in range(trials):
        w = rng.gen.standard_normal(d)
        if w_generator == "outlier":
            w[0] *= 10.0
        err_id = quant_error_sq(w, spec)
        bound_id = d * float(np.max(w * w)) / (4.0 * qden)
        if err_id > bound_id * (1.0 + 1e-12):
            id_violations += 1

        rc = RotationChoice("hadamard", d, sign_seed=int(rng.gen.integers(0, 2**63)))
        rw = rotate_vec(rc, w)
        err_rot = quant_error_sq(rw, spec)
        if err_rot > rot_factor * float(np.dot(w, w)) * (1.0 + 1e-12):
            rot_violations += 1
        sum_id += err_id
        sum_rot += err_rot

    return Prop1Report(
        d=d,
        b_w=b_w,
        trials=trials,
        delta=delta,
        identity_bound_violations=id_violations,
        rotated_bound_violation_frac=rot_violations / trials,
        mean_err_identity=sum_id / trials,
        mean_err_rotated=sum_rot / trials,
    )
