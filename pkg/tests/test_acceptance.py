"""Acceptance suite: one test per release criterion.

Each test prints a single [PASS]/[FAIL] line with the measured quantity so
the run log doubles as a scorecard.  Criteria 6 and 7 share one set of
long-horizon recursion runs through a module-scoped fixture.
"""

import json

import numpy as np
import pytest

from rostelab.hadamard import (
    RotationChoice,
    apply_rotation,
    check_prop1,
    materialize,
    rotate_vec,
)
from rostelab.labcli import DEFAULTS, _fig4_runs, main
from rostelab.numkit import Rng
from rostelab.qnet import QUADRATIC, LayerParams, QNetState, loss_and_grad
from rostelab.quant import QuantSpec, dequantize, fake_quantize, quantize
from rostelab.roste import (
    build_theorem1_setup,
    make_regression_task,
    run_theorem1_recursion,
    select_rotations,
    surrogate_error,
    verify_theorem1_bound,
)


def report(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    print(line)
    assert ok, line


def test_01_quantizer_invariants():
    # code range, half-step, and idempotence on 10^4 random tensors per
    # (bits, mode, grouping) combination
    rng = Rng(1, "accept/quant")
    bad = 0
    total = 0
    for bits in (2, 3, 4, 8):
        for mode in ("symmetric", "asymmetric"):
            lo = -(2 ** (bits - 1)) if mode == "symmetric" else 0
            hi = 2 ** (bits - 1) - 1 if mode == "symmetric" else 2**bits - 1
            for grouping in ("per_tensor", "per_row"):
                spec = QuantSpec(bits=bits, mode=mode, clip=1.0, grouping=grouping)
                scales = 10.0 ** rng.gen.uniform(-3, 3, size=10_000)
                for k in range(10_000):
                    x = rng.gen.standard_normal((3, 8)) * scales[k]
                    if k % 97 == 0:
                        x[0] = 0.0  # degenerate row
                    q = quantize(x, spec)
                    y = dequantize(q)
                    total += 1
                    if q.codes.min() < lo or q.codes.max() > hi:
                        bad += 1
                        continue
                    s = q.scale if grouping == "per_row" else np.repeat(q.scale, 3)
                    tol = s[:, None] / 2 * (1 + 1e-9) + 1e-12 * np.maximum(1.0, np.abs(x))
                    live = s > 0.0
                    if not np.all(np.abs(y - x)[live] <= tol[live]):
                        bad += 1
                        continue
                    y2 = fake_quantize(y, spec)
                    if not np.all(np.abs(y2 - y) <= 1e-12 * np.maximum(1.0, np.abs(y))):
                        bad += 1
    report(1, bad == 0, f"quantizer invariants, {bad}/{total} tensors violated")


def test_02_fwht_matches_dense():
    rng = Rng(2, "accept/fwht")
    worst = 0.0
    d = 2
    while d <= 1024:
        rc = RotationChoice("hadamard", d, sign_seed=int(rng.gen.integers(0, 2**63)))
        r = materialize(rc)
        x = rng.gen.standard_normal((100, d))
        for op, ref in (
            ("XR", x @ r),
            ("X_RT", x @ r.T),
            ("RT_W", r.T @ x.T),
            ("R_W", r @ x.T),
        ):
            arg = x if op in ("XR", "X_RT") else x.T
            worst = max(worst, float(np.max(np.abs(apply_rotation(rc, arg, op) - ref))))
        worst = max(worst, float(np.max(np.abs(rotate_vec(rc, x[0]) - r @ x[0]))))
        d *= 2
    report(2, worst <= 1e-10, f"fast transform vs dense, max |diff| = {worst:.3e}")


def test_03_deterministic_error_bound():
    # unrotated bound d * max_i w_i^2 / (4 (2^(b-1)-1)^2): zero violations
    rng = Rng(3, "accept/det-bound")
    violations = 0
    for d in (16, 64, 256):
        for b in (2, 4, 8):
            rep = check_prop1(d, b, 1000, 0.05, rng)
            violations += rep.identity_bound_violations
    report(3, violations == 0, f"deterministic bound, {violations} violations over 9000 draws")


def test_04_probabilistic_error_bound():
    # rotated bound holds with probability >= 1 - delta over the sign draw;
    # empirical violation fraction must stay within delta + 0.01
    rng = Rng(4, "accept/prob-bound")
    worst = 0.0
    for dist in ("gaussian", "outlier"):
        rep = check_prop1(256, 4, 10_000, 0.05, rng, w_generator=dist)
        worst = max(worst, rep.rotated_bound_violation_frac)
    report(4, worst <= 0.06, f"probabilistic bound, worst violation fraction = {worst:.4f}")


def test_05_ste_degenerates_to_plain_sgd():
    rng = Rng(5, "accept/ste")
    d = 8
    w0 = rng.gen.standard_normal((d, 1))
    x = rng.gen.standard_normal((60, d))
    y = rng.gen.standard_normal((60, 1))
    eta = 0.05
    net = QNetState([LayerParams(w0.copy(), RotationChoice("identity", d))])
    w_ref = w0.copy()
    sampler = Rng(5, "accept/ste/batches")
    worst = 0.0
    for _ in range(100):
        idx = sampler.gen.integers(0, 60, size=4)
        _, grads = loss_and_grad(net, x[idx], y[idx], QUADRATIC)
        net.layers[0].weight -= eta * grads[0]
        w_ref -= eta * (x[idx].T @ (x[idx] @ w_ref - y[idx]) / len(idx))
        worst = max(worst, float(np.max(np.abs(net.layers[0].weight - w_ref))))
    report(5, worst <= 1e-9, f"STE degeneration, max per-coordinate drift = {worst:.3e}")


@pytest.fixture(scope="module")
def recursion_reports():
    """Long-horizon scalar-model runs shared by the bound and floor checks.

    Both rotations see the same data seed and paired initial weights (drawn
    in original coordinates, then rotated into each setup's frame).
    """
    reports = {}
    for rotation in ("identity", "hadamard"):
        setup = build_theorem1_setup(64, 4, rotation, 10.0, 512, seed=7)
        trajs = []
        for s in range(20):
            w0 = Rng(7, f"accept/init/{s}").gen.standard_normal(64)
            v0 = apply_rotation(setup.rotation, w0.reshape(-1, 1), "RT_W").reshape(-1)
            trajs.append(run_theorem1_recursion(setup, 4, 20_000, seed=70_000 + s, v0=v0))
        reports[rotation] = verify_theorem1_bound(setup, trajs, slack=0.02)
    return reports


def test_06_convergence_bound_holds(recursion_reports):
    violations = sum(r.violations for r in recursion_reports.values())
    worst = max(r.max_ratio for r in recursion_reports.values())
    report(
        6,
        violations == 0,
        f"convergence bound, {violations} violations, max LHS/RHS = {worst:.3e}",
    )


def test_07_rotation_halves_error_floor(recursion_reports):
    # converged floor = seed-averaged error over the last logged decade
    floors = {
        kind: float(np.mean(rep.lhs[-10:])) for kind, rep in recursion_reports.items()
    }
    ratio = floors["hadamard"] / floors["identity"]
    report(7, ratio <= 0.5, f"rotation benefit, floor ratio = {ratio:.3f}")


def test_08_rotation_selection_beats_plain_ste():
    good = 0
    for s in range(20):
        cfg = dict(DEFAULTS["fig4"], seed=s)
        runs = _fig4_runs(cfg)
        ste, roste = runs["ste"], runs["roste"]
        ok = all(
            e_r < e_s
            for step, e_s, e_r in zip(ste.steps(), ste.surrogates(), roste.surrogates())
            if step > cfg["warmup"]
        )
        good += ok
    report(8, good >= 18, f"selection vs plain STE, ordered on {good}/20 seeds")


def test_09_layerwise_heuristic_near_optimal():
    # 4-bit weights, 8-bit per-row activations, depth 1..10, d=16
    w_spec = QuantSpec(bits=4, mode="symmetric", clip=1.0, grouping="per_tensor")
    x_spec = QuantSpec(bits=8, mode="symmetric", clip=1.0, grouping="per_row")
    rng = Rng(202, "accept/select")
    d = 16
    gaps = []
    for i in range(100):
        ell = int(rng.gen.integers(1, 11))
        layers = []
        for _ in range(ell):
            w = rng.gen.standard_normal((d, d)) / np.sqrt(d)
            if rng.gen.random() < 0.5:
                w[0, 0] *= 10.0
            layers.append(LayerParams(w, RotationChoice("identity", d), w_spec, x_spec))
        net = QNetState(layers)
        calib = rng.gen.standard_normal((32, d))
        picked = select_rotations(net, calib, "layerwise", seed=i)
        best = select_rotations(net, calib, "exhaustive", seed=i)
        e_lw, _ = surrogate_error(net, picked, calib)
        e_ex, _ = surrogate_error(net, best, calib)
        gaps.append((e_lw - e_ex) / e_ex if e_ex > 0 else 0.0)
    frac = float(np.mean([g <= 0.05 for g in gaps]))
    report(
        9,
        frac >= 0.90,
        f"heuristic within 5% on {frac:.0%} of 100 instances, max gap = {max(gaps):.4f}",
    )


def test_10_reruns_are_byte_identical(tmp_path):
    jobs = [
        ("fig4", {"T": 60, "data_count": 256}),
        ("prop1", {"trials": 200, "dims": [16, 64], "bits": [2, 4]}),
    ]
    identical = True
    for name, overrides in jobs:
        cfgf = tmp_path / f"{name}.json"
        cfgf.write_text(json.dumps(overrides))
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{name}-{tag}"
            code = main([name, "--config", str(cfgf), "--out", str(out), "--seed", "3"])
            assert code == 0
            outs.append(out)
        for csv in sorted(outs[0].glob("*.csv")):
            if csv.read_bytes() != (outs[1] / csv.name).read_bytes():
                identical = False
    report(10, identical, "byte-identical CSV output on re-run")
