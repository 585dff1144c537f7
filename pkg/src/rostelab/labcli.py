"""Experiment harness: config loading, orchestration, CSV emission.

Each run resolves its configuration (defaults < config file < flags <
ROSTE_SEED / ROSTE_OUT), echoes it into the output directory, writes
results.csv plus a manifest, and exits 0 only if every assertion of the
experiment held. Exit codes: 0 pass, 1 assertion failure, 2 config
error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DivergenceError, RosteLabError, UnsupportedDimensionError
from .hadamard import RotationChoice, apply_rotation, check_prop1, materialize
from .numkit import Rng
from .qnet import LayerParams, QNetState, QUADRATIC
from .quant import QuantSpec, quantize
from .roste import (
    RosteConfig,
    build_theorem1_setup,
    make_regression_task,
    qat_stage,
    run_roste,
    run_theorem1_recursion,
    select_rotations,
    surrogate_error,
    verify_theorem1_bound,
)

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

DEFAULTS = {
    "prop1": {
        "dims": [16, 64, 256],
        "bits": [2, 4, 8],
        "trials": 2000,
        "delta": 0.05,
        "distributions": ["gaussian", "outlier"],
        "seed": 0,
    },
    "theorem1": {
        "d": 64,
        "data_count": 512,
        "b_x": 4,
        "b_w": 4,
        "T": 20000,
        "sgd_seeds": 20,
        "outlier_scale": 10.0,
        "floor_ratio_max": 0.5,
        "bound_slack": 0.02,
        "seed": 0,
    },
    "fig4": {
        "d": 64,
        "data_count": 512,
        "outlier_scale": 10.0,
        "bits": 4,
        "T": 200,
        "eta": 0.02,
        "batch": 8,
        "calib_n": 128,
        "warmup": 10,
        "seed": 0,
    },
    "train": {
        "d": 64,
        "data_count": 512,
        "outlier_scale": 10.0,
        "bits": 4,
        "K": 1,
        "T": 200,
        "eta": 0.02,
        "batch": 8,
        "calib_n": 128,
        "selection": "layerwise",
        "resume_from": None,
        "seed": 0,
    },
    "select": {
        "instances": 100,
        "max_layers": 3,
        "dim": 16,
        "calib_n": 64,
        "bits": 4,
        "rel_tol": 0.05,
        "min_pass_frac": 0.90,
        "seed": 0,
    },
    "fwht_check": {
        "max_dim": 1024,
        "vectors": 10,
        "dims": None,  # explicit list overrides the power-of-two sweep
        "seed": 0,
    },
}


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def resolve_config(experiment: str, args) -> dict:
    cfg = dict(DEFAULTS[experiment])
    if args.config:
        with open(args.config) as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(cfg) - {"threads", "output_dir"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if os.environ.get("ROSTE_SEED"):
        cfg["seed"] = int(os.environ["ROSTE_SEED"])
    out = args.out or os.environ.get("ROSTE_OUT") or f"out_{experiment}"
    if os.environ.get("ROSTE_OUT"):
        out = os.environ["ROSTE_OUT"]
    cfg["experiment"] = experiment
    cfg["output_dir"] = str(out)
    cfg["threads"] = max(1, args.threads)
    return cfg


class Run:
    """Owns the output directory: config echo, results, manifest."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.outdir = Path(cfg["output_dir"])
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.started = time.time()
        self.outputs = []
        echo = self.outdir / "config.json"
        with open(echo, "w") as fh:
            json.dump(cfg, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.outputs.append(echo.name)

    def emit(self, name: str, header: list, rows: list) -> Path:
        path = self.outdir / name
        write_csv(path, header, rows)
        self.outputs.append(name)
        return path

    def finish(self, status: int) -> int:
        manifest = {
            "config_hash": config_hash({k: v for k, v in self.cfg.items() if k != "threads"}),
            "artifact_version": __version__,
            "seed": self.cfg.get("seed"),
            "duration_sec": round(time.time() - self.started, 3),
            "status": status,
            "outputs": sorted(self.outputs),
        }
        with open(self.outdir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return status


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def cmd_prop1(cfg: dict) -> int:
    if cfg["trials"] < 1:
        raise ConfigError("trials must be >= 1")
    run = Run(cfg)
    rows = []
    ok = True
    for dist in cfg["distributions"]:
        for d in cfg["dims"]:
            for b in cfg["bits"]:
                rng = Rng(cfg["seed"], f"prop1/{dist}/{d}/{b}")
                rep = check_prop1(d, b, cfg["trials"], cfg["delta"], rng, dist)
                rows.append(
                    [
                        rep.d,
                        rep.b_w,
                        rep.trials,
                        rep.delta,
                        rep.identity_bound_violations,
                        rep.rotated_bound_violation_frac,
                        rep.mean_err_identity,
                        rep.mean_err_rotated,
                        dist,
                    ]
                )
                if rep.identity_bound_violations != 0:
                    ok = False
                if rep.rotated_bound_violation_frac > cfg["delta"] + 0.01:
                    ok = False
    run.emit(
        "results.csv",
        [
            "d",
            "b_w",
            "trials",
            "delta",
            "eq16_violations",
            "eq17_violation_frac",
            "mean_err_identity",
            "mean_err_rotated",
            "dist",
        ],
        rows,
    )
    return run.finish(EXIT_PASS if ok else EXIT_FAIL)


def _theorem1_trajectories(setup, cfg):
    def one(seed):
        v0 = apply_rotation(
            setup.rotation,
            Rng(cfg["seed"], "thm1/init").gen.standard_normal((setup.d, 1)),
            "RT_W",
        ).reshape(-1)
        return run_theorem1_recursion(
            setup, cfg["b_w"], cfg["T"], seed=cfg["seed"] * 10000 + seed, v0=v0
        )

    seeds = range(cfg["sgd_seeds"])
    if cfg.get("threads", 1) > 1:
        with ThreadPoolExecutor(max_workers=cfg["threads"]) as ex:
            return list(ex.map(one, seeds))
    return [one(s) for s in seeds]


def cmd_theorem1(cfg: dict) -> int:
    if cfg["sgd_seeds"] < 1 or cfg["T"] < 1:
        raise ConfigError("sgd_seeds and T must be >= 1")
    run = Run(cfg)
    rows = []
    reports = {}
    for rotation in ("hadamard", "identity"):
        setup = build_theorem1_setup(
            cfg["d"], cfg["b_x"], rotation, cfg["outlier_scale"], cfg["data_count"], cfg["seed"]
        )
        trajectories = _theorem1_trajectories(setup, cfg)
        report = verify_theorem1_bound(setup, trajectories, slack=cfg["bound_slack"])
        reports[rotation] = report
        for step, lhs, rhs in zip(report.steps, report.lhs, report.rhs):
            rows.append([rotation, int(step), lhs, rhs, setup.mu, setup.lambda_min, setup.rho])
    run.emit(
        "results.csv",
        ["rotation", "step", "lhs", "rhs", "mu", "lambda_min", "rho"],
        rows,
    )

    ok = all(rep.violations == 0 for rep in reports.values())
    floor_ratio = reports["hadamard"].final_lhs / max(reports["identity"].final_lhs, 1e-300)
    if cfg["outlier_scale"] > 1.0 and floor_ratio > cfg["floor_ratio_max"]:
        ok = False
    run.emit(
        "summary.csv",
        ["rotation", "bound_violations", "max_ratio", "final_lhs", "floor_ratio"],
        [
            [r, rep.violations, rep.max_ratio, rep.final_lhs, floor_ratio]
            for r, rep in reports.items()
        ],
    )
    return run.finish(EXIT_PASS if ok else EXIT_FAIL)


def _fig4_runs(cfg: dict):
    (x, y), w0 = make_regression_task(
        cfg["d"], cfg["data_count"], cfg["outlier_scale"], cfg["seed"]
    )
    spec = QuantSpec(bits=cfg["bits"], mode="symmetric", clip=1.0, grouping="per_tensor")
    x_spec = QuantSpec(bits=cfg["bits"], mode="symmetric", clip=1.0, grouping="per_row")

    def build_net():
        return QNetState(
            [LayerParams(w0.copy(), RotationChoice("identity", cfg["d"]), spec, x_spec)]
        )

    results = {}
    for label, selection in (("ste", "identity"), ("roste", "layerwise")):
        rcfg = RosteConfig(
            K=1,
            T=cfg["T"],
            eta=cfg["eta"],
            calib_n=cfg["calib_n"],
            batch=cfg["batch"],
            seed=cfg["seed"],
            selection=selection,
        )
        _, trajs = run_roste(build_net(), (x, y), rcfg, QUADRATIC)
        results[label] = trajs[0]
    return results


def cmd_fig4(cfg: dict) -> int:
    run = Run(cfg)
    try:
        results = _fig4_runs(cfg)
    except DivergenceError as exc:
        traj = exc.trajectory
        rows = [[p.step, p.loss, p.surrogate] for p in (traj.points if traj else [])]
        run.emit("diagnostic.csv", ["step", "loss", "surrogate"], rows)
        run.finish(EXIT_DIVERGED)
        raise

    ste, roste = results["ste"], results["roste"]
    rows = [
        [int(s), e_ste, e_roste]
        for s, e_ste, e_roste in zip(ste.steps(), ste.surrogates(), roste.surrogates())
    ]
    run.emit("results.csv", ["step", "e_ste", "e_roste"], rows)

    ok = True
    if cfg["outlier_scale"] > 1.0:
        for s, e_s, e_r in zip(ste.steps(), ste.surrogates(), roste.surrogates()):
            if s > cfg["warmup"] and not (e_r < e_s):
                ok = False
    return run.finish(EXIT_PASS if ok else EXIT_FAIL)


def _dump_net(net: QNetState, config: RosteConfig, rng_state: dict, done: int, path: Path):
    layers = []
    for layer in net.layers:
        wr = apply_rotation(layer.rotation, layer.weight, "RT_W")
        q = quantize(wr, layer.w_spec) if layer.w_spec is not None else None
        layers.append(
            {
                "weight": layer.weight.tolist(),
                "rotation": {
                    "kind": layer.rotation.kind,
                    "dim": layer.rotation.dim,
                    "sign_seed": layer.rotation.sign_seed,
                },
                "w_spec": vars(layer.w_spec) if layer.w_spec else None,
                "x_spec": vars(layer.x_spec) if layer.x_spec else None,
                "activation": layer.activation,
                "codes": q.codes.tolist() if q else None,
                "scale": q.scale.tolist() if q else None,
                "zero_point": q.zero_point.tolist() if q else None,
            }
        )
    blob = {
        "format": "rostelab-dump-v1",
        "layers": layers,
        "completed_steps": done,
        "rng_state": {
            "bit_generator": rng_state["bit_generator"],
            "state": {k: int(v) for k, v in rng_state["state"].items()},
            "has_uint32": int(rng_state["has_uint32"]),
            "uinteger": int(rng_state["uinteger"]),
        },
        "train_config": {
            "K": config.K,
            "T": config.T,
            "eta": config.eta,
            "calib_n": config.calib_n,
            "batch": config.batch,
            "seed": config.seed,
            "selection": config.selection,
        },
    }
    with open(path, "w") as fh:
        json.dump(blob, fh, sort_keys=True)
        fh.write("\n")


def load_net_dump(path) -> tuple:
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("format") != "rostelab-dump-v1":
        raise ConfigError(f"unrecognized dump format in {path}")
    layers = []
    for ld in blob["layers"]:
        rot = RotationChoice(**ld["rotation"])
        w_spec = QuantSpec(**ld["w_spec"]) if ld["w_spec"] else None
        x_spec = QuantSpec(**ld["x_spec"]) if ld["x_spec"] else None
        layers.append(
            LayerParams(np.array(ld["weight"]), rot, w_spec, x_spec, ld["activation"])
        )
    return QNetState(layers), blob


def cmd_train(cfg: dict) -> int:
    run = Run(cfg)
    (x, y), w0 = make_regression_task(
        cfg["d"], cfg["data_count"], cfg["outlier_scale"], cfg["seed"]
    )
    spec = QuantSpec(bits=cfg["bits"], mode="symmetric", clip=1.0, grouping="per_tensor")
    x_spec = QuantSpec(bits=cfg["bits"], mode="symmetric", clip=1.0, grouping="per_row")
    rcfg = RosteConfig(
        K=cfg["K"],
        T=cfg["T"],
        eta=cfg["eta"],
        calib_n=cfg["calib_n"],
        batch=cfg["batch"],
        seed=cfg["seed"],
        selection=cfg["selection"],
    )

    try:
        if cfg.get("resume_from"):
            net, blob = load_net_dump(cfg["resume_from"])
            done = blob["completed_steps"]
            if cfg["T"] <= done:
                raise ConfigError(f"resume target T={cfg['T']} <= completed {done}")
            rotations = [layer.rotation for layer in net.layers]
            rng = Rng(rcfg.seed, "qat/round0")
            rng.set_state(blob["rng_state"])
            stage_cfg = RosteConfig(
                K=1,
                T=cfg["T"] - done,
                eta=rcfg.eta,
                calib_n=rcfg.calib_n,
                batch=rcfg.batch,
                seed=rcfg.seed,
                selection=rcfg.selection,
                log_every=rcfg.resolved_log_every(),
            )
            net, traj = qat_stage(net, rotations, (x, y), stage_cfg, QUADRATIC, rng=rng, step_offset=done)
            trajectories = [traj]
            done = cfg["T"]
        else:
            net = QNetState(
                [LayerParams(w0, RotationChoice("identity", cfg["d"]), spec, x_spec)]
            )
            rng = Rng(rcfg.seed, "qat/round0")
            calib = x[: min(rcfg.calib_n, x.shape[0])]
            rotations = select_rotations(net, calib, rcfg.selection, rcfg.seed)
            net, traj = qat_stage(net, rotations, (x, y), rcfg, QUADRATIC, rng=rng)
            trajectories = [traj]
            done = cfg["T"]
    except DivergenceError as exc:
        traj = exc.trajectory
        rows = [[p.step, p.loss, p.surrogate] for p in (traj.points if traj else [])]
        run.emit("diagnostic.csv", ["step", "loss", "surrogate"], rows)
        run.finish(EXIT_DIVERGED)
        raise

    rows = [
        [p.step, p.loss, p.pred_error_q, p.surrogate, p.rotation_kinds]
        for traj in trajectories
        for p in traj.points
    ]
    run.emit(
        "results.csv",
        ["step", "loss", "pred_error_q", "surrogate", "rotations"],
        rows,
    )
    dump_path = run.outdir / "model.json"
    _dump_net(net, rcfg, rng.state(), done, dump_path)
    run.outputs.append(dump_path.name)
    return run.finish(EXIT_PASS)


def cmd_select(cfg: dict) -> int:
    run = Run(cfg)
    rows = []
    hits = 0
    for inst in range(cfg["instances"]):
        rng = Rng(cfg["seed"], f"select/{inst}")
        ell = int(rng.gen.integers(1, cfg["max_layers"] + 1))
        d = cfg["dim"]
        spec = QuantSpec(bits=cfg["bits"], mode="symmetric", clip=1.0, grouping="per_tensor")
        x_spec = QuantSpec(bits=cfg["bits"], mode="symmetric", clip=1.0, grouping="per_row")
        layers = []
        for i in range(ell):
            w = rng.gen.standard_normal((d, d)) / np.sqrt(d)
            if rng.gen.random() < 0.5:
                w[0, 0] *= 10.0  # outlier layer: rotation should win here
            layers.append(
                LayerParams(w, RotationChoice("identity", d), spec, x_spec, "none")
            )
        net = QNetState(layers)
        calib = rng.gen.standard_normal((cfg["calib_n"], d))

        cfg_lw = select_rotations(net, calib, "layerwise", cfg["seed"] + inst)
        cfg_ex = select_rotations(net, calib, "exhaustive", cfg["seed"] + inst)
        e_lw, _ = surrogate_error(net, cfg_lw, calib)
        e_ex, _ = surrogate_error(net, cfg_ex, calib)
        gap = (e_lw - e_ex) / max(e_ex, 1e-300)
        within = gap <= cfg["rel_tol"]
        hits += within
        rows.append([inst, ell, e_lw, e_ex, gap, int(within)])
    frac = hits / cfg["instances"]
    run.emit(
        "results.csv",
        ["instance", "layers", "e_layerwise", "e_exhaustive", "rel_gap", "within_tol"],
        rows,
    )
    ok = frac >= cfg["min_pass_frac"]
    return run.finish(EXIT_PASS if ok else EXIT_FAIL)


def cmd_fwht_check(cfg: dict) -> int:
    run = Run(cfg)
    if cfg["dims"] is not None:
        dims = list(cfg["dims"])
    else:
        dims = []
        d = 2
        while d <= cfg["max_dim"]:
            dims.append(d)
            d *= 2
    rows = []
    ok = True
    rng = Rng(cfg["seed"], "fwht")
    for d in dims:
        rc = RotationChoice("hadamard", d, sign_seed=cfg["seed"] + d)
        dense = materialize(rc)
        x = rng.gen.standard_normal((cfg["vectors"], d))
        err = float(np.max(np.abs(apply_rotation(rc, x, "XR") - x @ dense)))
        rows.append([d, err])
        if err > 1e-10:
            ok = False
    run.emit("results.csv", ["d", "max_abs_err"], rows)
    return run.finish(EXIT_PASS if ok else EXIT_FAIL)


COMMANDS = {
    "prop1": ("prop1", cmd_prop1),
    "theorem1": ("theorem1", cmd_theorem1),
    "fig4": ("fig4", cmd_fig4),
    "train": ("train", cmd_train),
    "select": ("select", cmd_select),
    "fwht-check": ("fwht_check", cmd_fwht_check),
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rostelab",
        description="Rotation-enabled QAT lab: quantizer, rotation, and convergence experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)

    experiment, fn = COMMANDS[args.command]
    try:
        cfg = resolve_config(experiment, args)
        status = fn(cfg)
    except (ConfigError, UnsupportedDimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except RosteLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if status == EXIT_PASS:
        print("PASS")
    else:
        print("FAIL")
    return status


if __name__ == "__main__":
    sys.exit(main())
