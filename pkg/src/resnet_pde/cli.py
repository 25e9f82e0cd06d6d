"""``resnet-pde``: dataset generation, solving, training, convergence and gradient checks.

Every command takes an optional JSON config (``--config``), accepts
``--set key.path=value`` overrides and writes a run manifest next to its
artifacts. Exit codes: 0 success, 1 validation or tolerance failure,
2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from importlib import metadata

import numpy as np

from . import config as cfgmod
from . import io as rio
from .config import ConfigError
from .experiments import (build_dataset, class_targets, convergence_table, make_field_problem,
                          make_terminal, make_velocity, steps_for_cfl)
from .flows import FCTerminal, TimeGrid
from .gradcheck import check
from .hj_solver import solve
from .pim import OperatorConfig, wnll_interpolate
from .training import DivergenceError, TrainConfig, field_predictions, train_field, train_transport
from .velocity import VelocityModel

log = logging.getLogger("resnet_pde")


class ToleranceFailure(Exception):
    """A check ran but its tolerance was exceeded (exit code 1)."""


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _manifest_path(artifact_path):
    return os.path.splitext(artifact_path)[0] + ".manifest.json"


def write_manifest(path, command, config, artifacts, started, status="ok"):
    """Artifacts are hashed so reruns can be compared byte for byte."""
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "artifacts": {k: {"path": v, "sha256": rio.file_hash(v)} for k, v in artifacts.items()},
        "version": code_version(),
        "wall_clock_seconds": time.perf_counter() - started,
        "status": status,
    }
    rio.write_json(path, manifest)
    return manifest


def _outdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc.strerror or exc}") from exc
    return path


# ----------------------------------------------------------------------------
# commands (each takes a validated config and returns the artifact dict)
# ----------------------------------------------------------------------------

def cmd_gen(cfg):
    rng = np.random.default_rng(cfg["seed"])
    ds = build_dataset({**cfg["dataset"], "path": None}, rng)
    csv_path, json_path = rio.write_dataset(ds, cfg["output"])
    return {"dataset": csv_path, "dataset_manifest": json_path}, cfg["output"]


def _operator_cfg(pde):
    return OperatorConfig(normalization=pde["normalization"])


def _load_velocity(vcfg):
    return VelocityModel.from_dict(rio.read_checkpoint(vcfg["checkpoint"])["velocity"])


def _field_setup(cfg, ds, rng, kind):
    vcfg, pde = cfg["velocity"], cfg["pde"]
    pts = ds.cloud.points

    def build(L):
        if vcfg["checkpoint"]:
            vel = _load_velocity(vcfg)
        else:
            vel = make_velocity(vcfg["variant"], ds.cloud.dim, L, np.random.default_rng(seed),
                                vcfg["hidden"], centers=pts, init_points=pts)
        if vcfg["zero"]:
            vel = vel.with_flat(np.zeros(vel.size))
        return make_field_problem(ds, kind, vel, vel.n_steps, pde["dissipation"],
                                  _operator_cfg(pde), pde["initial"])

    seed = int(rng.integers(2**31))
    problem, targets, idx = build(vcfg["steps"])
    if kind == "viscous_hj" and pde["auto_steps"] and not vcfg["checkpoint"]:
        L = steps_for_cfl(problem)
        if L != problem.grid.L:
            log.info("using %d steps to satisfy the step-size bound", L)
            problem, targets, idx = build(L)
    return problem, targets, idx


def cmd_train(cfg):
    out = _outdir(cfg["output_dir"])
    rng = np.random.default_rng(cfg["seed"])
    kind, variant = cfg["problem"], cfg["velocity"]["variant"]
    ds = build_dataset(cfg["dataset"], rng, with_constraints=kind == "viscous_hj")
    if not ds.is_classification:
        raise ConfigError(f"dataset.kind '{ds.kind}' has no class labels; training needs "
                          "two_moons, two_blobs or a labeled CSV")
    if kind == "viscous_hj" and not ds.constraint_mask.any():
        raise ConfigError("viscous_hj needs a nonempty constraint set (dataset.constraint_ratio)")
    tcfg = TrainConfig(seed=int(rng.integers(2**31)), **cfg["train"])
    try:
        if kind == "transport" and variant == "resblock":
            mrng = np.random.default_rng(int(rng.integers(2**31)))
            X = ds.cloud.points[ds.train_mask]
            model = (_load_velocity(cfg["velocity"]) if cfg["velocity"]["checkpoint"] else
                     make_velocity("resblock", ds.cloud.dim, cfg["velocity"]["steps"], mrng,
                                   cfg["velocity"]["hidden"], init_points=X))
            terminal = make_terminal(ds.n_classes, ds.cloud.dim, mrng)
            _, report = train_transport(ds, model, terminal, tcfg)
        else:
            problem, targets, idx = _field_setup(cfg, ds, rng, kind)
            _, report = train_field(problem, ds.labels, targets, idx, tcfg)
    except DivergenceError as exc:
        report = exc.report
        arts = _write_train(out, report)
        raise RuntimeError(f"training diverged at epoch {exc.epoch}; last good checkpoint "
                           f"in {arts['checkpoint']}") from exc
    return _write_train(out, report), os.path.join(out, "run.json")


def _write_train(out, report):
    ckpt = rio.write_checkpoint(os.path.join(out, "checkpoint.json"), report.checkpoint)
    d = report.to_dict()
    d["checkpoint"] = ckpt
    return {"report": rio.write_json(os.path.join(out, "report.json"), d),
            "loss": rio.atomic_write(os.path.join(out, "loss.csv"), report.loss_csv()),
            "checkpoint": ckpt}


def cmd_solve(cfg):
    out = _outdir(cfg["output_dir"])
    rng = np.random.default_rng(cfg["seed"])
    kind = cfg["problem"]
    ds = build_dataset(cfg["dataset"], rng, with_constraints=kind in ("viscous_hj", "wnll"))
    arts = {}
    if kind == "wnll":
        u = wnll_interpolate(ds, _operator_cfg(cfg["pde"]))
        diag = {"kind": "wnll", "labeled": int(ds.constraint_mask.sum())}
    else:
        problem, _, _ = _field_setup(cfg, ds, rng, kind)
        result = solve(problem, snapshots=cfg["snapshots"])
        result.write(os.path.join(out, "solve"))
        arts["snapshots"] = os.path.join(out, "solve_snapshots.csv")
        arts["diagnostics"] = os.path.join(out, "solve_diagnostics.json")
        u = result.final
    if ds.is_classification:
        pred = field_predictions(u)
        acc = float(np.mean(pred == ds.labels))
        log.info("accuracy %.4f", acc)
        if kind == "wnll":
            diag["accuracy"] = acc
    arts["field"] = rio.write_field(os.path.join(out, "field.csv"), u)
    if kind == "wnll":
        arts["diagnostics"] = rio.write_json(os.path.join(out, "solve_diagnostics.json"), diag)
    return arts, os.path.join(out, "run.json")


def cmd_convergence(cfg):
    rows = convergence_table(cfg["manifold"], cfg["sizes"], cfg["delta_rule"],
                             cfg["delta_constant"], cfg["field"], cfg["normalization"],
                             cfg["radius"], cfg["seed"])
    path = rio.write_table(cfg["output"], ["n", "delta", "l2_error", "rate"], rows)
    return {"table": path}, cfg["output"]


def cmd_gradcheck(cfg):
    results = [check(v, k, cfg["instances"], cfg["seed"], cfg["h"], cfg["tol"],
                     corrupt=cfg["corrupt_gradient"])
               for v in cfg["variants"] for k in cfg["problems"]]
    report = {"tol": cfg["tol"], "h": cfg["h"], "passed": all(r.passed for r in results),
              "results": [r.to_dict() for r in results]}
    for r in results:
        log.info("%-8s %-10s max rel err %.3e %s", r.variant, r.kind, r.max_rel_err,
                 "ok" if r.passed else "FAIL")
    path = rio.write_json(cfg["output"], report)
    return {"report": path}, cfg["output"], report["passed"]


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "solve": cmd_solve,
            "convergence": cmd_convergence, "gradcheck": cmd_gradcheck}


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="resnet-pde", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config or a previous run manifest")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted path; JSON value)")
        sp.add_argument("--seed", type=int)
        return sp

    g = common(sub.add_parser("gen", help="generate a labeled point cloud"))
    g.add_argument("kind", nargs="?")
    g.add_argument("n", nargs="?", type=int)
    g.add_argument("-o", "--out", help="CSV path")
    for name in ("train", "solve"):
        s = common(sub.add_parser(name, help=f"{name} a control problem"))
        s.add_argument("-o", "--out", help="output directory")
    c = common(sub.add_parser("convergence", help="gradient convergence table"))
    c.add_argument("manifold", nargs="?")
    c.add_argument("--sizes", type=int, nargs="+")
    c.add_argument("--delta-rule")
    c.add_argument("-o", "--out", help="CSV path")
    k = common(sub.add_parser("gradcheck", help="reverse mode vs finite differences"))
    k.add_argument("--corrupt-gradient", action="store_true",
                   help="perturb the analytic gradient (harness check)")
    k.add_argument("-o", "--out", help="JSON report path")
    return p


def _flag_overrides(args):
    out = []
    if args.seed is not None:
        out.append((["seed"], args.seed))
    if getattr(args, "out", None):
        key = "output_dir" if args.command in ("train", "solve") else "output"
        out.append(([key], args.out))
    if args.command == "gen":
        if args.kind:
            out.append((["dataset", "kind"], args.kind))
        if args.n is not None:
            out.append((["dataset", "n"], args.n))
    if args.command == "convergence":
        if args.manifold:
            out.append((["manifold"], args.manifold))
        if args.sizes:
            out.append((["sizes"], args.sizes))
        if args.delta_rule:
            out.append((["delta_rule"], args.delta_rule))
    if args.command == "gradcheck" and args.corrupt_gradient:
        out.append((["corrupt_gradient"], True))
    return out


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    started = time.perf_counter()
    try:
        raw = cfgmod.load(args.config) if args.config else {}
        raw = cfgmod.apply_overrides(raw, args.set)
        raw = cfgmod.apply_overrides(raw, _flag_overrides(args))
        cfg = cfgmod.validate(args.command, raw)
        res = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    passed = res[2] if len(res) > 2 else True
    artifacts, anchor = res[0], res[1]
    path = anchor if anchor.endswith("run.json") else _manifest_path(anchor)
    write_manifest(path, args.command, cfg, artifacts, started,
                   status="ok" if passed else "tolerance_exceeded")
    if not passed:
        print("error: gradient check tolerance exceeded", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
