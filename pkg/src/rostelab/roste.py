"""Alternating rotation selection and STE-based quantization-aware training.

The driver freezes a per-layer rotation configuration (chosen to minimize
the total weight-plus-activation quantization error on a calibration
batch), runs T minibatch STE-SGD steps, and optionally repeats for K
outer rounds. A separate engine implements the scalar linear quantized
model used for the convergence-bound experiments: the STE recursion on
quantized-rotated features, with per-step tracking of the Gram-weighted
weight quantization error so the analytic error bound can be evaluated
numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DivergenceError, UsageError
from .hadamard import RotationChoice, apply_rotation, derive_sign_seed
from .numkit import Rng
from .qnet import (
    LossKind,
    QNetState,
    QUADRATIC,
    _loss_and_output_grad,
    forward,
    loss_and_grad,
    prediction_error_quantized,
)
from .quant import QuantSpec, fake_quantize, quant_error_sq

__all__ = [
    "RosteConfig",
    "TrainTrajectory",
    "Theorem1Setup",
    "Theorem1Trajectory",
    "surrogate_error",
    "select_rotations",
    "qat_stage",
    "run_roste",
    "build_theorem1_setup",
    "run_theorem1_recursion",
    "verify_theorem1_bound",
    "make_regression_task",
]

_SELECTION_MODES = ("exhaustive", "layerwise", "identity", "hadamard")


@dataclass
class RosteConfig:
    """Driver hyperparameters.

    selection 'identity' / 'hadamard' force a fixed configuration and
    skip the lower-level search (the plain-STE and always-rotate
    baselines).
    """

    K: int = 1
    T: int = 200
    eta: float = 0.05
    calib_n: int = 128
    batch: int = 8
    seed: int = 0
    selection: str = "layerwise"
    log_every: Optional[int] = None
    calib_precision: str = "quantized"  # quantized | full
    divergence_limit: float = 1e12

    def __post_init__(self):
        if self.K < 1 or self.T < 1 or self.calib_n < 1 or self.batch < 1:
            raise ConfigError("K, T, calib_n and batch must all be >= 1")
        if self.selection not in _SELECTION_MODES:
            raise ConfigError(f"unknown selection mode {self.selection!r}")
        if self.calib_precision not in ("quantized", "full"):
            raise ConfigError(f"unknown calib_precision {self.calib_precision!r}")

    def resolved_log_every(self) -> int:
        if self.log_every is not None:
            return max(1, int(self.log_every))
        return max(1, self.T // 200)


@dataclass
class TrajPoint:
    step: int
    loss: float
    pred_error_q: float
    surrogate: float
    rotation_kinds: str


@dataclass
class TrainTrajectory:
    points: list = field(default_factory=list)

    def log(self, point: TrajPoint) -> None:
        if self.points and point.step <= self.points[-1].step:
            raise UsageError("trajectory steps must be strictly increasing")
        if not all(
            math.isfinite(v) for v in (point.loss, point.pred_error_q, point.surrogate)
        ):
            raise UsageError("logged values must be finite")
        self.points.append(point)

    def surrogates(self) -> np.ndarray:
        return np.array([p.surrogate for p in self.points])

    def steps(self) -> np.ndarray:
        return np.array([p.step for p in self.points])


def _apply_rotations(net: QNetState, rotations: list) -> QNetState:
    if len(rotations) != len(net.layers):
        raise UsageError("one rotation choice per layer required")
    out = net.copy()
    for layer, rc in zip(out.layers, rotations):
        layer.rotation = rc
    return out


def surrogate_error(
    net: QNetState,
    rotations: list,
    calib_x: np.ndarray,
    calib_precision: str = "quantized",
):
    """Total weight-plus-activation quantization error of a candidate
    rotation configuration on a calibration batch.

    Returns (total, per_layer) where per_layer[i] = (weight_term,
    activation_term). Layer inputs are produced by forward passes through
    the candidate-rotated network; calib_precision picks whether those
    passes themselves quantize ('quantized', default) or stay in full
    precision.
    """
    calib_x = np.asarray(calib_x, dtype=np.float64)
    if calib_x.ndim != 2 or calib_x.shape[0] == 0:
        raise UsageError("calibration batch must be a nonempty 2-D matrix")
    if len(rotations) != len(net.layers):
        raise UsageError("one rotation choice per layer required")

    n = calib_x.shape[0]
    per_layer = []
    h = calib_x
    for layer, rc in zip(net.layers, rotations):
        xr = apply_rotation(rc, h, "XR")
        wr = apply_rotation(rc, layer.weight, "RT_W")
        w_term = quant_error_sq(wr, layer.w_spec) if layer.w_spec is not None else 0.0
        a_term = (quant_error_sq(xr, layer.x_spec) / n) if layer.x_spec is not None else 0.0
        per_layer.append((w_term, a_term))

        if calib_precision == "quantized":
            xq = fake_quantize(xr, layer.x_spec) if layer.x_spec is not None else xr
            wq = fake_quantize(wr, layer.w_spec) if layer.w_spec is not None else wr
            pre = xq @ wq
        else:
            pre = h @ layer.weight
        h = np.maximum(pre, 0.0) if layer.activation == "relu" else pre

    total = float(sum(w + a for w, a in per_layer))
    return total, per_layer


def _candidate_choices(net: QNetState, seed: int) -> list:
    """(identity, hadamard-or-None) candidate pair per layer."""
    pairs = []
    for i, layer in enumerate(net.layers):
        ident = RotationChoice("identity", layer.in_dim)
        d = layer.in_dim
        if d >= 2 and (d & (d - 1)) == 0:
            had = RotationChoice("hadamard", d, sign_seed=derive_sign_seed(seed, i))
        else:
            had = None
        pairs.append((ident, had))
    return pairs


def select_rotations(
    net: QNetState,
    calib_x: np.ndarray,
    mode: str,
    seed: int,
    calib_precision: str = "quantized",
) -> list:
    """Pick identity or hadamard per layer to minimize the surrogate error.

    'exhaustive' searches all 2^l assignments (l <= 20); 'layerwise'
    evaluates only the all-identity and all-hadamard sweeps and picks per
    layer by the smaller per-layer contribution. Ties go to identity.
    """
    ell = len(net.layers)
    pairs = _candidate_choices(net, seed)

    if mode == "identity":
        return [p[0] for p in pairs]
    if mode == "hadamard":
        return [p[1] if p[1] is not None else p[0] for p in pairs]

    if mode == "exhaustive":
        if ell > 20:
            raise UsageError(f"exhaustive selection refused for {ell} > 20 layers")
        best = None
        best_cfg = None
        # Masks ordered by hadamard count so ties resolve toward identity.
        for mask in sorted(range(2**ell), key=lambda m: (bin(m).count("1"), m)):
            cfg = [
                pairs[i][1] if (mask >> i) & 1 and pairs[i][1] is not None else pairs[i][0]
                for i in range(ell)
            ]
            total, _ = surrogate_error(net, cfg, calib_x, calib_precision)
            if best is None or total < best * (1.0 - 1e-12):
                best, best_cfg = total, cfg
        return best_cfg

    if mode == "layerwise":
        all_i = [p[0] for p in pairs]
        all_h = [p[1] if p[1] is not None else p[0] for p in pairs]
        _, per_i = surrogate_error(net, all_i, calib_x, calib_precision)
        _, per_h = surrogate_error(net, all_h, calib_x, calib_precision)
        cfg = []
        for i in range(ell):
            err_i = sum(per_i[i])
            err_h = sum(per_h[i])
            pick_h = pairs[i][1] is not None and err_h < err_i * (1.0 - 1e-12)
            cfg.append(pairs[i][1] if pick_h else pairs[i][0])
        return cfg

    raise ConfigError(f"unknown selection mode {mode!r}")


def _rotation_kinds(rotations: list) -> str:
    return ",".join("H" if rc.kind == "hadamard" else "I" for rc in rotations)


def qat_stage(
    net: QNetState,
    rotations: list,
    data,
    config: RosteConfig,
    loss: LossKind = QUADRATIC,
    rng: Optional[Rng] = None,
    step_offset: int = 0,
) -> tuple:
    """T minibatch STE-SGD steps under a frozen rotation configuration."""
    x, y = data
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    net = _apply_rotations(net, rotations)
    rng = rng if rng is not None else Rng(config.seed, "qat")
    calib = x[: min(config.calib_n, n)]
    log_every = config.resolved_log_every()
    kinds = _rotation_kinds(rotations)

    traj = TrainTrajectory()

    def log_state(step):
        full_loss, _ = _eval_loss(net, x, y, loss)
        if loss.tag == "quadratic":
            pred_err = prediction_error_quantized(net, x, y)
        else:
            pred_err = full_loss
        surr, _ = surrogate_error(net, rotations, calib, config.calib_precision)
        traj.log(TrajPoint(step, full_loss, pred_err, surr, kinds))

    log_state(step_offset)
    y = np.asarray(y)
    for t in range(1, config.T + 1):
        idx = rng.gen.integers(0, n, size=config.batch)
        value, grads = loss_and_grad(net, x[idx], y[idx], loss)
        if not math.isfinite(value) or value > config.divergence_limit:
            raise DivergenceError(f"loss diverged at step {t}: {value}", traj)
        for layer, g in zip(net.layers, grads):
            layer.weight -= config.eta * g
        if t % log_every == 0 or t == config.T:
            log_state(step_offset + t)
    return net, traj


def _eval_loss(net, x, y, loss):
    out, _ = forward(net, x)
    return _loss_and_output_grad(out, y, loss)


def run_roste(
    pretrained: QNetState,
    data,
    config: RosteConfig,
    loss: LossKind = QUADRATIC,
) -> tuple:
    """Full driver: K rounds of rotation selection followed by a QAT stage."""
    x, _ = data
    x = np.asarray(x, dtype=np.float64)
    net = pretrained.copy()
    trajectories = []
    calib = x[: min(config.calib_n, x.shape[0])]
    for k in range(config.K):
        rotations = select_rotations(
            net, calib, config.selection, config.seed, config.calib_precision
        )
        rng = Rng(config.seed, f"qat/round{k}")
        net, traj = qat_stage(
            net, rotations, data, config, loss, rng=rng, step_offset=k * config.T
        )
        trajectories.append(traj)
    return net, trajectories


# ---------------------------------------------------------------------------
# Scalar linear quantized model: interpolation setup and STE recursion
# ---------------------------------------------------------------------------


@dataclass
class Theorem1Setup:
    """Interpolating least-squares instance on quantized-rotated features.

    Labels are built as y_j = <f_j, v_star> with f_j the quantized
    rotated features and v_star the rotated-space interpolator, so the
    interpolation assumption holds exactly by construction.
    """

    d: int
    rotation: RotationChoice
    x_spec: QuantSpec
    w_star: np.ndarray      # original-space teacher
    v_star: np.ndarray      # rotated-space interpolator R^T w_star
    features: np.ndarray    # N x d quantized rotated features
    labels: np.ndarray      # N
    gram: np.ndarray        # d x d empirical Gram of the features
    lambda_min: float
    rho: float
    mu: float

    @property
    def eta(self) -> float:
        return self.lambda_min / (6.0 * self.rho)

    @property
    def data_count(self) -> int:
        return self.features.shape[0]


def build_theorem1_setup(
    d: int,
    b_x: int,
    rotation: str,
    outlier_scale: float,
    data_count: int,
    seed: int,
) -> Theorem1Setup:
    """Draw data, quantize rotated features, and estimate the curvature
    constants (smallest nonzero Gram eigenvalue, feature-norm bound).

    outlier_scale multiplies coordinate 0 of the teacher weight vector;
    1.0 gives the isotropic control condition.
    """
    rng = Rng(seed, "thm1")
    x = rng.gen.standard_normal((data_count, d))

    if rotation == "hadamard":
        rc = RotationChoice("hadamard", d, sign_seed=derive_sign_seed(seed, 0))
    else:
        rc = RotationChoice("identity", d)

    x_spec = QuantSpec(bits=b_x, mode="symmetric", clip=1.0, grouping="per_row")
    features = fake_quantize(apply_rotation(rc, x, "XR"), x_spec)

    w_star = rng.gen.standard_normal(d)
    w_star[0] *= outlier_scale
    v_star = apply_rotation(rc, w_star.reshape(-1, 1), "RT_W").reshape(-1)
    labels = features @ v_star

    gram = features.T @ features / data_count
    eigvals = np.linalg.eigvalsh(gram)
    nonzero = eigvals[eigvals > 1e-10 * eigvals[-1]]
    if nonzero.size == 0:
        raise UsageError("degenerate Gram matrix: all features are zero")
    lambda_min = float(nonzero[0])
    rho = float(np.max(np.sum((features @ gram) * features, axis=1)))
    mu = lambda_min**2 / (12.0 * rho)

    return Theorem1Setup(
        d=d,
        rotation=rc,
        x_spec=x_spec,
        w_star=w_star,
        v_star=v_star,
        features=features,
        labels=labels,
        gram=gram,
        lambda_min=lambda_min,
        rho=rho,
        mu=mu,
    )


@dataclass
class Theorem1Trajectory:
    steps: np.ndarray            # logged step indices
    pred_error: np.ndarray       # quantized prediction error at logged steps
    weight_err_gram: np.ndarray  # ||Q_w(v^s) - v^s||_G^2 at every step s = 0..T
    initial_error: float


def run_theorem1_recursion(
    setup: Theorem1Setup,
    b_w: int,
    T: int,
    seed: int,
    v0: Optional[np.ndarray] = None,
    log_every: Optional[int] = None,
    eta: Optional[float] = None,
) -> Theorem1Trajectory:
    """STE-SGD on the scalar quantized model, tracked in rotated space.

    The weight iterate v = R^T w is updated as
    v <- v - eta * (<f_t, Q_w(v)> - y_t) f_t, which is the original-space
    STE recursion expressed on the rotated coordinates.
    """
    rng = Rng(seed, "thm1/sgd")
    w_spec = QuantSpec(bits=b_w, mode="symmetric", clip=1.0, grouping="per_tensor")
    f, y, g = setup.features, setup.labels, setup.gram
    n = setup.data_count
    eta = setup.eta if eta is None else eta
    log_every = max(1, T // 200) if log_every is None else max(1, log_every)

    if v0 is None:
        v = Rng(seed, "thm1/init").gen.standard_normal(setup.d)
    else:
        v = np.array(v0, dtype=np.float64, copy=True)

    def pred_error(vq):
        r = f @ vq - y
        return float(0.5 * np.mean(r * r))

    def werr(vv):
        e = fake_quantize(vv.reshape(1, -1), w_spec).reshape(-1) - vv
        return float(e @ (g @ e))

    steps = [0]
    vq = fake_quantize(v.reshape(1, -1), w_spec).reshape(-1)
    errs = [pred_error(vq)]
    weight_errs = [werr(v)]
    for t in range(1, T + 1):
        i = int(rng.gen.integers(0, n))
        vq = fake_quantize(v.reshape(1, -1), w_spec).reshape(-1)
        v = v - eta * (float(f[i] @ vq) - y[i]) * f[i]
        weight_errs.append(werr(v))
        if t % log_every == 0 or t == T:
            vq = fake_quantize(v.reshape(1, -1), w_spec).reshape(-1)
            steps.append(t)
            errs.append(pred_error(vq))

    return Theorem1Trajectory(
        steps=np.array(steps),
        pred_error=np.array(errs),
        weight_err_gram=np.array(weight_errs),
        initial_error=errs[0],
    )


@dataclass
class BoundReport:
    steps: np.ndarray
    lhs: np.ndarray           # seed-averaged quantized prediction error
    rhs: np.ndarray           # seed-averaged analytic bound
    violations: int           # logged steps where lhs > rhs * (1 + slack)
    max_ratio: float
    final_lhs: float


def verify_theorem1_bound(
    setup: Theorem1Setup,
    trajectories: list,
    slack: float = 0.02,
) -> BoundReport:
    """Evaluate the convergence bound pointwise at the logged steps.

    For each seed the bound at iterate tau >= 1 is
    (1-mu)^tau * L0 + (6 + 2/mu) * sum_{s=0}^{tau} (1-mu)^{tau-1-s} E_s,
    with E_s the Gram-weighted weight quantization error at iterate s.
    LHS and RHS are averaged across seeds before comparison.
    """
    if not trajectories:
        raise UsageError("need at least one trajectory")
    mu = setup.mu
    steps = trajectories[0].steps
    for tr in trajectories[1:]:
        if not np.array_equal(tr.steps, steps):
            raise UsageError("trajectories have mismatched logging grids")

    lhs = np.mean([tr.pred_error for tr in trajectories], axis=0)
    rhs_all = []
    for tr in trajectories:
        decay = 1.0 - mu
        coef = 6.0 + 2.0 / mu
        # S_tau = sum_{s<=tau} (1-mu)^(tau-1-s) * E_s, built incrementally.
        s_acc = tr.weight_err_gram[0] / decay
        rhs_by_step = {0: tr.initial_error}
        for tau in range(1, tr.weight_err_gram.shape[0]):
            s_acc = decay * s_acc + tr.weight_err_gram[tau] / decay
            rhs_by_step[tau] = decay**tau * tr.initial_error + coef * s_acc
        rhs_all.append([rhs_by_step[int(t)] for t in steps])
    rhs = np.mean(rhs_all, axis=0)

    mask = steps >= 1
    ratios = lhs[mask] / rhs[mask]
    violations = int(np.sum(ratios > 1.0 + slack))
    return BoundReport(
        steps=steps,
        lhs=lhs,
        rhs=rhs,
        violations=violations,
        max_ratio=float(np.max(ratios)),
        final_lhs=float(lhs[-1]),
    )


def make_regression_task(
    d: int,
    n: int,
    outlier_scale: float,
    seed: int,
    init_jitter: float = 0.1,
) -> tuple:
    """Single-layer synthetic regression whose teacher carries a weight
    outlier, so converged weights keep the outlier structure.

    Returns ((x, y), pretrained_weight) with y = x @ w_teacher.
    """
    rng = Rng(seed, "task")
    x = rng.gen.standard_normal((n, d))
    w_teacher = rng.gen.standard_normal((d, 1))
    w_teacher[0, 0] = outlier_scale * max(1.0, abs(w_teacher[0, 0]))
    y = x @ w_teacher
    w0 = w_teacher + init_jitter * rng.gen.standard_normal((d, 1))
    return (x, y), w0
