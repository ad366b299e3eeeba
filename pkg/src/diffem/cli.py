"""Command line entry point: ``diffem <command> [--config FILE] [options]``.

Each command validates its JSON config, runs one driver and prints a
one-line JSON summary on stdout. Outputs are staged in a temporary
directory and moved into the output directory only on success; on a
failure during the run the output directory receives just ``failure.json``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""
import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
import traceback
from pathlib import Path

import numpy as np

from diffem import config, flows, gmm, io, ot
from diffem.errors import (ArgumentError, DegenerateCovariance, MalformedImage, NotConverged,
                           SingularSystem)

log = logging.getLogger("diffem")

NUMERICAL_ERRORS = (DegenerateCovariance, SingularSystem, NotConverged)
INPUT_ERRORS = (ArgumentError, MalformedImage, FileNotFoundError, ValueError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def build_parser():
    parser = _Parser(prog="diffem", description="Differentiable EM with MW2 losses")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in config.COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--output", help="output directory (overrides output_dir)")
        p.add_argument("--workers", type=int, help="parallel workers for sweeps")
        p.add_argument("--quiet", action="store_true", help="no progress messages")
    return parser


def _workers(arg):
    if arg is not None:
        if arg < 1:
            raise ArgumentError("--workers must be >= 1")
        return arg
    env = os.environ.get("DIFFEM_WORKERS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ArgumentError(f"DIFFEM_WORKERS={env!r} is not an integer") from None
        if value < 1:
            raise ArgumentError("DIFFEM_WORKERS must be >= 1")
        return value
    return os.cpu_count() or 1


# ----------------------------------------------------------------------------
# output helpers


def _write_trace(out, trace, snapshots=True):
    io.write_rows_csv(out / "energies.csv", ["step", "energy", "learning_rate"],
                      [[t, float(e), float(lr)] for t, (e, lr)
                       in enumerate(zip(trace.energies, trace.learning_rates))])
    if trace.weight_snapshots:
        K = len(trace.weight_snapshots[0])
        io.write_rows_csv(out / "weights.csv", ["step"] + [f"w{k}" for k in range(K)],
                          [[t] + [float(v) for v in w] for t, w in enumerate(trace.weight_snapshots)])
    if snapshots:
        snap = out / "snapshots"
        snap.mkdir()
        for step, pts in zip(trace.snapshot_steps, trace.point_snapshots):
            io.write_points_csv(snap / f"points_{step:06d}.csv", pts)
    io.write_points_csv(out / "final_points.csv", trace.final_points)
    io.write_gmm_json(out / "final_gmm.json", trace.final_theta)


def _flow_config(doc, em, **defaults):
    keys = ("grad_method", "gd_steps", "learning_rate", "subsample_ratio", "snapshot_every",
            "halve_on_increase", "optimizer")
    kw = dict(defaults)
    kw.update({k: doc[k] for k in keys if k in doc})
    return flows.FlowConfig(em=em, seed=int(doc.get("seed", 0)), **kw)


def _auto_lr(doc, cfg, x0, theta0, loss):
    """Keep a configured learning rate; otherwise halve from n until the first step descends.

    An automatically chosen rate also halves on later increases unless the
    config says otherwise.
    """
    if "learning_rate" in doc:
        return cfg
    method = cfg.grad_method if cfg.grad_method in ("AD", "AI", "OS") else "OS"
    lr = flows.select_learning_rate(theta0, x0, cfg.em, loss, method, lr0=float(len(x0)))
    halve = bool(doc.get("halve_on_increase", True))
    return dataclasses.replace(cfg, learning_rate=lr, halve_on_increase=halve)


def _initial_gmm(doc, x, K, em):
    if "theta0" in doc:
        return io.read_gmm_json(doc["theta0"])
    return gmm.kmeanspp_init(x, K, int(doc.get("seed", 0)), em.cov_regulariser)


def _float(v):
    return None if v is None or not np.isfinite(v) else float(v)


# ----------------------------------------------------------------------------
# drivers: each takes (doc, out_dir, workers) and returns the summary dict


def cmd_fit(doc, out, workers):
    x = gmm.check_dataset(io.read_points(doc["input"]))
    em = config.em_config(doc)
    init = doc.get("init", "kmeans++")
    if init != "kmeans++":
        raise ArgumentError(f"unknown init {init!r}; only 'kmeans++' is available")
    theta0 = gmm.kmeanspp_init(x, doc["K"], int(doc.get("seed", 0)), em.cov_regulariser)
    theta, diag = gmm.em_fit(theta0, x, em)
    io.write_gmm_json(out / "gmm.json", theta)
    io.write_rows_csv(out / "log_likelihood.csv", ["iteration", "log_likelihood"],
                      [[t, float(v)] for t, v in enumerate(diag.log_likelihoods)])
    return {"n": int(x.shape[0]), "d": int(x.shape[1]), "K": theta.n_components,
            "T": em.iterations, "log_likelihood": float(diag.log_likelihoods[-1]),
            "residual": float(diag.residual)}


def cmd_flow(doc, out, workers):
    problem = doc.get("problem", "files" if "source" in doc else "toy")
    if problem == "toy":
        setup = flows.toy_flow_setup(int(doc.get("seed", 0)))
        base = setup["config"]
        em = config.em_config(doc, T=base.em.iterations, fix_weights=base.em.fix_weights,
                              eps_r=base.em.cov_regulariser)
        cfg = _flow_config(doc, em, grad_method=base.grad_method, gd_steps=base.gd_steps,
                           learning_rate=base.learning_rate)
        x0, theta0, target = setup["x0"], setup["theta0"], setup["target"]
        tp = None
    else:
        for key in ("source", "target"):
            if key not in doc:
                raise ArgumentError(f"flow on files needs {key!r}")
        x0 = gmm.check_dataset(io.read_points(doc["source"]))
        target = io.read_gmm_json(doc["target"])
        em = config.em_config(doc, fix_weights=True)
        cfg = _flow_config(doc, em)
        theta0 = _initial_gmm(doc, x0, doc.get("K", target.n_components), em)
        tp = io.read_points(doc["target_points"]) if "target_points" in doc else None
        cfg = _auto_lr(doc, cfg, x0, theta0, flows.mw2_loss([target]))
    trace = flows.run_flow(x0, theta0, target, cfg, target_points=tp)
    _write_trace(out, trace)
    return {"problem": problem, "grad_method": cfg.grad_method, "steps": cfg.gd_steps,
            "initial_energy": _float(trace.energies[0]) if trace.energies else None,
            "final_energy": _float(trace.final_energy)}


def cmd_weights_pathology(doc, out, workers):
    uniform = bool(doc.get("uniform", False))
    nu_w = doc.get("nu_weights", [0.5, 0.3, 0.2])
    if abs(sum(nu_w) - 1.0) > 1e-12:
        raise ArgumentError("nu_weights must sum to 1")
    setup = flows.weight_pathology_setup(nu_w, uniform, int(doc.get("seed", 0)),
                                         n=int(doc.get("n", 200)))
    em = config.em_config(doc, T=10, eps_r=1e-4)
    n = setup["x0"].shape[0]
    cfg = _flow_config(doc, em, gd_steps=300, learning_rate=0.1 * n, halve_on_increase=True)
    trace = flows.run_weight_pathology(nu_w, uniform, setup["x0"], setup["theta0"],
                                       setup["target"], cfg)
    _write_trace(out, trace)
    return {"uniform": uniform, "final_energy": _float(trace.final_energy),
            "weight_error": trace.weight_error,
            "final_weights": trace.final_theta.weights.tolist()}


def cmd_barycentre(doc, out, workers):
    targets = [io.read_gmm_json(p) for p in doc["targets"]]
    x0 = gmm.check_dataset(io.read_points(doc["source"]))
    em = config.em_config(doc, fix_weights=True)
    cfg = _flow_config(doc, em)
    theta0 = _initial_gmm(doc, x0, doc.get("K", targets[0].n_components), em)
    if len(targets) >= 2:
        cfg = _auto_lr(doc, cfg, x0, theta0, flows.mw2_loss(targets))
    trace = flows.run_barycentre_flow(targets, x0, theta0, cfg)
    _write_trace(out, trace)
    return {"targets": len(targets), "final_energy": _float(trace.final_energy)}


def cmd_projected_barycentre(doc, out, workers):
    targets = [io.read_gmm_json(p) for p in doc["targets"]]
    x0 = gmm.check_dataset(io.read_points(doc["source"]))
    em = config.em_config(doc, fix_weights=True, eps_r=1e-3)
    cfg = _flow_config(doc, em)
    if x0.shape[1] != 3 or len(targets) != 3:
        raise ArgumentError("expected a 3-D cloud and three 2-D targets")
    theta0 = _initial_gmm(doc, x0, doc.get("K", targets[0].n_components), em)
    projections = [ot.coordinate_projection(3, [a for a in range(3) if a != k]) for k in range(3)]
    cfg = _auto_lr(doc, cfg, x0, theta0, flows.mw2_loss(targets, projections))
    trace = flows.run_projected_barycentre(targets, x0, cfg, theta0=theta0)
    _write_trace(out, trace)
    return {"final_energy": _float(trace.final_energy)}


def cmd_colour_transfer(doc, out, workers):
    from diffem import imaging
    src = io.read_image_float(doc["source"])
    tgt = io.read_image_float(doc["target"])
    em = config.em_config(doc, T=1, fix_weights=True, eps_r=1e-3)
    kw = {k: doc[k] for k in ("K", "gd_steps", "learning_rate", "fit_iterations") if k in doc}
    cfg = imaging.ColourConfig(em=em, seed=int(doc.get("seed", 0)), **kw)
    res = imaging.colour_transfer(src, tgt, unbalanced=config.unbalanced_config(doc.get("unbalanced")),
                                  cfg=cfg)
    io.write_png(res.image, out / "output.png")
    io.write_rows_csv(out / "energies.csv", ["step", "energy"],
                      [[t, float(e)] for t, e in enumerate(res.energies)])
    return {"K": cfg.K, "pixels": int(src.shape[0] * src.shape[1]),
            "unbalanced": doc.get("unbalanced") is not None,
            "final_energy": _float(res.energies[-1]) if res.energies else None}


def cmd_texture(doc, out, workers):
    from diffem import imaging
    tgt = io.read_image_float(doc["target"])
    em = config.em_config(doc, T=1, fix_weights=True, eps_r=1e-3)
    kw = {k: doc[k] for k in ("K", "gd_steps", "lr", "fit_iterations", "nn_projection") if k in doc}
    if "scales" in doc:
        kw["scales"] = tuple(tuple(s) for s in doc["scales"])
    cfg = imaging.TextureConfig(em=em, seed=int(doc.get("seed", 0)), **kw)
    shape = tuple(doc.get("out_shape", tgt.shape[:2]))
    res = imaging.texture_synthesis(tgt, shape, cfg)
    io.write_png(res.image, out / "texture.png")
    io.write_rows_csv(out / "energies.csv", ["step", "energy"],
                      [[t, float(e)] for t, e in enumerate(res.energies)])
    first = res.energies[0] if res.energies else None
    last = res.energies[-1] if res.energies else None
    return {"shape": list(shape), "initial_energy": _float(first), "final_energy": _float(last)}


def cmd_grad_compare(doc, out, workers):
    from diffem import studies
    em = config.em_config(doc)
    sweep = studies.ComparisonSweep(n=tuple(doc.get("n", [200])), K=tuple(doc.get("K", [3])),
                                    T=tuple(doc.get("T", [5, 40])),
                                    repeats=int(doc.get("repeats", 20)),
                                    seed=int(doc.get("seed", 0)), em=em)
    bank = [io.read_gmm_json(p) for p in doc["gmms"]] if "gmms" in doc else None
    rows, summary = studies.run_gradient_comparison(sweep, bank, workers, output=out)
    return {"rows": len(rows), "failures": sum(r["status"] != "ok" for r in rows),
            "cells": [{k: (_float(v) if isinstance(v, float) else v) for k, v in s.items()
                       if k in ("gmm", "n", "K", "T", "relmse_os_median", "relmse_ai_median",
                                "fixed_point_mse_median")} for s in summary]}


def cmd_sample_complexity(doc, out, workers):
    from diffem import studies
    mu = io.read_gmm_json(doc["mu"]) if "mu" in doc else None
    nu = io.read_gmm_json(doc["nu"]) if "nu" in doc else None
    rows, summary = studies.run_sample_complexity(
        mu, nu, n_grid=tuple(doc.get("n_grid", [500, 1000, 2000, 5000])),
        repeats=int(doc.get("repeats", 10)), separation_scales=doc.get("separation_scales"),
        iterations=int(doc.get("iterations", 200)), seed=int(doc.get("seed", 0)),
        workers=workers, output=out)
    regimes = {}
    for s in summary:
        regimes[s["separation"]] = {"spearman_one_sample": _float(s["spearman_one_sample"]),
                                    "spearman_two_sample": _float(s["spearman_two_sample"])}
    return {"rows": len(rows), "regimes": regimes}


def cmd_fixtures(doc, out, workers):
    from diffem import fixtures
    which = doc.get("which", ["e3", "vanishing", "n2"])
    summary = {}
    if "e3" in which:
        r = fixtures.fixture_e3_landscape(float(doc.get("e3_epsilon", 0.1)))
        (out / "e3.json").write_text(json.dumps(r, indent=2, default=float))
        summary["e3"] = {"value": r["value_at_origin"], "grid_points_lower": r["grid_points_lower"]}
    if "vanishing" in which:
        reports = [fixtures.fixture_vanishing_gradient(float(e))
                   for e in doc.get("vanishing_epsilons", [0.05, 0.3])]
        (out / "vanishing.json").write_text(json.dumps(reports, indent=2, default=float))
        summary["vanishing"] = {str(r["epsilon"]): r["grad_norm"] for r in reports}
    if "n2" in which:
        r = fixtures.fixture_n2_landscape(gamma=float(doc.get("n2_gamma", 0.3)),
                                          grid=int(doc.get("n2_grid", 21)),
                                          starts=int(doc.get("n2_starts", 100)),
                                          seed=int(doc.get("seed", 0)))
        (out / "n2.json").write_text(json.dumps(r, indent=2, default=float))
        summary["n2"] = {"starts": r["starts"], "global": r["global"], "boundary": r["boundary"]}
    return summary


def cmd_selfcheck(doc, out, workers):
    from diffem import selfcheck
    r = selfcheck.run_selfcheck(int(doc.get("instances", 20)), int(doc.get("seed", 0)),
                                float(doc.get("rtol", 1e-5)))
    (out / "selfcheck.json").write_text(json.dumps(r, indent=2))
    if not r["passed"]:
        raise SingularSystem(f"analytic Jacobian disagrees with finite differences "
                             f"(max relative error {r['max_error']:.3g})")
    return {"instances": r["instances"], "max_error": r["max_error"], "passed": True}


DRIVERS = {
    "fit": cmd_fit,
    "flow": cmd_flow,
    "weights-pathology": cmd_weights_pathology,
    "barycentre": cmd_barycentre,
    "projected-barycentre": cmd_projected_barycentre,
    "colour-transfer": cmd_colour_transfer,
    "texture": cmd_texture,
    "grad-compare": cmd_grad_compare,
    "sample-complexity": cmd_sample_complexity,
    "fixtures": cmd_fixtures,
    "selfcheck": cmd_selfcheck,
}


# ----------------------------------------------------------------------------


def _prepare(argv):
    args = build_parser().parse_args(argv)
    doc = config.load(args.config) if args.config else {}
    if not isinstance(doc, dict):
        raise ArgumentError("config must be a JSON object")
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.output is not None:
        doc["output_dir"] = args.output
    doc.setdefault("output_dir", os.path.join("diffem_output", args.command))
    config.validate(args.command, doc)
    return args, doc


def _publish(staging, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    for entry in sorted(staging.iterdir()):
        dest = out_dir / entry.name
        if dest.is_dir():
            shutil.rmtree(dest)
        elif dest.exists():
            dest.unlink()
        shutil.move(str(entry), str(dest))
    stale = out_dir / "failure.json"
    if stale.exists() and not (staging / "failure.json").exists():
        stale.unlink()


def _fail(out_dir, command, exc, code):
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {"command": command, "exit_code": code, "error": type(exc).__name__,
                    "message": str(exc)}
        (out_dir / "failure.json").write_text(json.dumps(manifest, indent=2))
    except OSError as err:
        print(f"diffem: could not write failure manifest: {err}", file=sys.stderr)


def main(argv=None):
    try:
        args, doc = _prepare(sys.argv[1:] if argv is None else argv)
        workers = _workers(args.workers)
    except INPUT_ERRORS as exc:
        print(f"diffem: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="diffem: %(message)s", stream=sys.stderr)
    out_dir = Path(doc["output_dir"])
    staging = Path(tempfile.mkdtemp(prefix="diffem-"))
    try:
        log.info("running %s", args.command)
        summary = DRIVERS[args.command](doc, staging, workers)
        _publish(staging, out_dir)
    except NUMERICAL_ERRORS as exc:
        print(f"diffem: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        _fail(out_dir, args.command, exc, 2)
        return 2
    except INPUT_ERRORS as exc:
        print(f"diffem: {type(exc).__name__}: {exc}", file=sys.stderr)
        _fail(out_dir, args.command, exc, 1)
        return 1
    except Exception as exc:  # unexpected: keep the traceback for diagnosis
        traceback.print_exc()
        _fail(out_dir, args.command, exc, 1)
        return 1
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    line = {"command": args.command, "output_dir": str(out_dir), "seed": doc.get("seed", 0)}
    line.update(summary)
    print(json.dumps(line, default=_json_default))
    return 0


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serialisable: {type(v).__name__}")


if __name__ == "__main__":
    sys.exit(main())
