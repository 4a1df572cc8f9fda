"""Command-line entry point: one JSON config, subcommands for every
pipeline, reproducible seeding, CSV/JSON artifacts plus a manifest.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__, dynamics, hazard, meanfield, network, pdmp, stationary
from .assumptions import check_assumptions
from .dynamics import ToleranceConfig, build_partition
from .io_utils import fmt, grid_measure_rows, lift_rows, write_csv, write_json
from .model import ModelSpec, State

STOCHASTIC = {"simulate-linear", "simulate-network", "simulate-mkv",
              "certify"}
COMMANDS = ["check-assumptions", "simulate-linear", "simulate-network",
            "simulate-mkv", "stationary", "certify", "continuation",
            "reproduce-fig2"]


class ConfigError(ValueError):
    def __init__(self, msg, pointer=""):
        super().__init__(f"{pointer or '/'}: {msg}")
        self.pointer = pointer


NUMERICAL_ERRORS = (
    dynamics.NoSeparatrix, dynamics.StepUnderflow, dynamics.LeftDomain,
    hazard.HazardExhausted, hazard.HorizonExceeded, pdmp.NonConvergence,
    stationary.NonConvergence, stationary.ResetIsEquilibrium,
    meanfield.NoRoot, network.BlowUpCascade, MemoryError,
)


@dataclass
class RunConfig:
    command: str
    model: ModelSpec
    seed: Optional[int]
    threads: int
    output_dir: Path
    tolerances: ToleranceConfig
    block: dict
    defaulted: list[str] = field(default_factory=list)
    raw: dict = field(default_factory=dict)


_SCHEMAS: dict[str, dict[str, Any]] = {
    "simulate": {"w0": 5.0, "v0": None, "horizon": 100.0, "kappa": 0.0,
                 "n_samples": 0, "emit_trajectory": False},
    "network": {"N": 100, "horizon": 100.0, "bin": 1.0,
                "mu0": {"kind": "point", "v": 1.0, "w": 5.0},
                "allow_zero_delay": False, "watchdog_rate": 1e5},
    "mkv": {"horizon": 20.0, "M": 10_000, "nodes_per_block": 16},
    "stationary": {"n_w": 800, "w_span": 40.0, "kappa": 0.0,
                   "lift": None},
    "certify": {"n_w": 600, "w_span": 40.0,
                "r_sweep": [1e-3, 1.0, 14], "k_range": [1, 2, 3, 4, 6, 8],
                "tv": {"n_steps": 30, "n_paths": 20_000,
                       "w_pair": None}},
    "continuation": {"J_max": 2.0, "n_points": 9, "n_w": 500},
    "check": {"kappa_max": 1.0, "v_window": [-30.0, 60.0], "grid_n": 4000},
    "fig2": {"J_max": 2.0, "n_points": 9, "n_w": 500,
             "inset": {"v_lo": -7.0, "v_hi": 8.0, "nv": 301,
                       "w_lo": -10.0, "w_hi": 30.0, "nw": 401}},
}

_BLOCK_FOR = {
    "check-assumptions": "check", "simulate-linear": "simulate",
    "simulate-network": "network", "simulate-mkv": "mkv",
    "stationary": "stationary", "certify": "certify",
    "continuation": "continuation", "reproduce-fig2": "fig2",
}

_TOL_FIELDS = {"rel_tol", "abs_tol", "v_explode", "v_switch", "sep_tol",
               "graze_tol", "fp_tol", "max_iters", "root_tol"}


def _apply_defaults(block: dict, schema: dict, pointer: str,
                    defaulted: list[str]) -> dict:
    out = {}
    for key, val in block.items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r}", f"{pointer}/{key}")
        out[key] = val
    for key, default in schema.items():
        if key not in out:
            out[key] = default
            defaulted.append(f"{pointer}/{key}")
        elif isinstance(default, dict) and isinstance(out[key], dict):
            out[key] = _apply_defaults(out[key], default,
                                       f"{pointer}/{key}", defaulted)
    return out


def validate_config(doc: dict, command: str,
                    overrides: Optional[dict] = None) -> RunConfig:
    """Typed config with defaults applied; every defaulted field is listed
    for the manifest, unknown keys are rejected with their paths."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    overrides = overrides or {}
    known_top = {"model", "seed", "threads", "output_dir", "tolerances"} \
        | set(_SCHEMAS)
    for key in doc:
        if key not in known_top:
            raise ConfigError(f"unknown key {key!r}", f"/{key}")
    if "model" not in doc:
        raise ConfigError("missing model block", "/model")
    defaulted: list[str] = []
    try:
        model = ModelSpec.from_json(doc["model"])
    except Exception as err:
        raise ConfigError(str(err), "/model") from err

    seed = overrides.get("seed", doc.get("seed"))
    if command in STOCHASTIC and seed is None:
        raise ConfigError(f"{command} is stochastic: a seed is required",
                          "/seed")
    if seed is not None:
        seed = int(seed)
        if not (0 <= seed < 2**64):
            raise ConfigError("seed must fit in 64 bits", "/seed")

    threads = overrides.get("threads", doc.get("threads"))
    if threads is None:
        threads = os.environ.get("MKV_NEURO_THREADS", 1)
        defaulted.append("/threads")
    if threads == "auto":
        threads = os.cpu_count() or 1
    try:
        threads = int(threads)
    except (TypeError, ValueError):
        raise ConfigError("threads must be an integer or 'auto'", "/threads")
    if threads < 1:
        raise ConfigError("threads must be >= 1", "/threads")

    out_dir = Path(overrides.get("output_dir")
                   or doc.get("output_dir") or "out")
    if "output_dir" not in doc and "output_dir" not in overrides:
        defaulted.append("/output_dir")

    tol_doc = doc.get("tolerances", {})
    if not isinstance(tol_doc, dict):
        raise ConfigError("tolerances must be an object", "/tolerances")
    for key in tol_doc:
        if key not in _TOL_FIELDS:
            raise ConfigError(f"unknown key {key!r}", f"/tolerances/{key}")
    tol = ToleranceConfig(**{k: (int(v) if k == "max_iters" else float(v))
                             for k, v in tol_doc.items()})

    block_name = _BLOCK_FOR[command]
    block_doc = doc.get(block_name, {})
    if not isinstance(block_doc, dict):
        raise ConfigError(f"{block_name} must be an object", f"/{block_name}")
    block = _apply_defaults(block_doc, _SCHEMAS[block_name],
                            f"/{block_name}", defaulted)
    for key, val in overrides.items():
        if key in ("seed", "threads", "output_dir"):
            continue
        if key in _SCHEMAS[block_name]:
            block[key] = val
    return RunConfig(command=command, model=model, seed=seed,
                     threads=threads, output_dir=out_dir, tolerances=tol,
                     block=block, defaulted=defaulted, raw=doc)


# -- command bodies ------------------------------------------------------------


def _cmd_check(cfg: RunConfig) -> list[str]:
    blk = cfg.block
    rep = check_assumptions(cfg.model, kappa_max=blk["kappa_max"],
                            v_window=tuple(blk["v_window"]),
                            grid_n=int(blk["grid_n"]))
    write_json(cfg.output_dir / "assumptions.json", rep.to_doc())
    for name, verdict in sorted(rep.verdicts.items()):
        print(f"{name}: {verdict}")
    return ["assumptions.json"]


def _cmd_simulate_linear(cfg: RunConfig) -> list[str]:
    blk = cfg.block
    model = cfg.model
    part = build_partition(model, ctrl=cfg.tolerances)
    v0 = model.v_r if blk["v0"] is None else float(blk["v0"])
    x0 = State(v0, float(blk["w0"]))
    outs = []
    path = pdmp.simulate_linear(model, part, x0, kappa=float(blk["kappa"]),
                                horizon=float(blk["horizon"]),
                                rng=(cfg.seed, "linear", 0),
                                ctrl=cfg.tolerances)
    rec = path.record
    write_csv(cfg.output_dir / "jumps.csv", "n,T_n,S_n,w_n",
              ((n + 1, rec.T[n], rec.S[n], rec.w[n])
               for n in range(len(rec))))
    outs.append("jumps.csv")
    n_samp = int(blk["n_samples"])
    if n_samp > 0:
        batch = hazard.sample_batch(model, [x0], n_samp, cfg.seed,
                                    tag="linear/samples",
                                    kappa=float(blk["kappa"]),
                                    ctrl=cfg.tolerances)
        write_csv(cfg.output_dir / "samples.csv",
                  "sample_id,T1,v_pre,w_pre,exp_draw",
                  ((i, batch["T1"][i], batch["v_pre"][i], batch["w_pre"][i],
                    batch["exp_draw"][i]) for i in range(n_samp)))
        outs.append("samples.csv")
    if blk["emit_trajectory"]:
        traj = dynamics.integrate(model, part, x0,
                                  kappa=float(blk["kappa"]),
                                  t_span=(0.0, float(blk["horizon"])),
                                  ctrl=cfg.tolerances)
        write_csv(cfg.output_dir / "trajectory.csv", "t,v,w,region",
                  ((traj.t[i], traj.v[i], traj.w[i], traj.region[i].value)
                   for i in range(traj.t.size)))
        outs.append("trajectory.csv")
    return outs


def _cmd_network(cfg: RunConfig) -> list[str]:
    blk = cfg.block
    part = build_partition(cfg.model, ctrl=cfg.tolerances)
    raster, state = network.simulate_network(
        cfg.model, part, N=int(blk["N"]), mu0=blk["mu0"],
        horizon=float(blk["horizon"]), seed=cfg.seed, ctrl=cfg.tolerances,
        allow_zero_delay=bool(blk["allow_zero_delay"]),
        watchdog_rate=float(blk["watchdog_rate"]))
    write_csv(cfg.output_dir / "raster.csv", "t,i",
              zip(raster.t, raster.i))
    rate = network.population_rate(raster, float(blk["bin"]))
    write_csv(cfg.output_dir / "rate.csv", "t,rate",
              zip(rate["t"], rate["rate"]))
    return ["raster.csv", "rate.csv"]


def _cmd_mkv(cfg: RunConfig) -> list[str]:
    blk = cfg.block
    model = cfg.model
    part = build_partition(model, ctrl=cfg.tolerances)
    mu0 = lambda: (model.v_r, model.v_r + model.w_b)
    mf = meanfield.simulate_mkv(model, part, mu0,
                                horizon=float(blk["horizon"]),
                                M=int(blk["M"]), rng=(cfg.seed, "mkv"),
                                nodes_per_block=int(blk["nodes_per_block"]),
                                ctrl=cfg.tolerances, threads=cfg.threads,
                                archive=False)
    write_csv(cfg.output_dir / "mkv_path.csv", "t,kappa,stderr",
              zip(mf.t, mf.kappa, mf.stderr))
    return ["mkv_path.csv"]


def _cmd_stationary(cfg: RunConfig) -> list[str]:
    blk = cfg.block
    model = cfg.model
    kap = float(blk["kappa"])
    part = build_partition(model, (model.I, model.I + kap),
                           ctrl=cfg.tolerances)
    kern = stationary.build_kernel(model, part, n_w=int(blk["n_w"]),
                                   w_max=part.w_star + float(blk["w_span"]),
                                   kappa=kap, ctrl=cfg.tolerances,
                                   threads=cfg.threads)
    mu = stationary.invariant_density(kern, cfg.tolerances)
    write_csv(cfg.output_dir / "density.csv", "w,p", grid_measure_rows(mu))
    outs = ["density.csv"]
    e_t1 = stationary.expected_t1(model, kern, mu)
    write_json(cfg.output_dir / "stationary.json",
               {"E_T1": e_t1, "kappa": kap,
                "spectral_gap_proxy": getattr(mu, "spectral_gap_proxy",
                                              None)})
    outs.append("stationary.json")
    if blk["lift"]:
        lf = blk["lift"]
        lift = stationary.lift_to_plane(
            model, part, mu,
            (float(lf["v_lo"]), float(lf["v_hi"]), int(lf["nv"]),
             float(lf["w_lo"]), float(lf["w_hi"]), int(lf["nw"])),
            kappa=kap, ctrl=cfg.tolerances, threads=cfg.threads)
        write_csv(cfg.output_dir / "lift.csv", "v,w,density",
                  lift_rows(lift))
        outs.append("lift.csv")
    return outs


def _cmd_certify(cfg: RunConfig) -> list[str]:
    blk = cfg.block
    model = cfg.model
    part = build_partition(model, ctrl=cfg.tolerances)
    kern = stationary.build_kernel(model, part, n_w=int(blk["n_w"]),
                                   w_max=part.w_star + float(blk["w_span"]),
                                   ctrl=cfg.tolerances, threads=cfg.threads)
    lo, hi, num = blk["r_sweep"]
    lyap = stationary.verify_lyapunov(
        model, part, kern, np.geomspace(float(lo), float(hi), int(num)))
    doeb = stationary.estimate_doeblin(model, part, kern,
                                       [int(k) for k in blk["k_range"]])
    mu = stationary.invariant_density(kern, cfg.tolerances)
    tail = stationary.tail_exponent(mu)
    tvb = blk["tv"]
    pair = tvb["w_pair"] or [part.w_star + model.w_b,
                             2 * part.w23 + 4 * model.w_b]
    tv = stationary.tv_decay(model, part,
                             (float(pair[0]), float(pair[1])),
                             n_steps=int(tvb["n_steps"]),
                             n_paths=int(tvb["n_paths"]), seed=cfg.seed,
                             ctrl=cfg.tolerances, threads=cfg.threads)
    docs = [c.to_doc() for c in (lyap, doeb, tail, tv)]
    for doc in docs:
        ev = doc.get("evidence", {})
        for bulky in ("profile", "profile_nodes", "distances",
                      "reference_construction"):
            if bulky in ev and isinstance(ev[bulky], list) \
                    and len(ev[bulky]) > 64:
                ev[bulky] = ev[bulky][:64]
        print(f"{doc['kind']}: {'pass' if doc['verdict'] else 'fail'}")
    write_json(cfg.output_dir / "certificates.json", docs)
    return ["certificates.json"]


def _continuation_rows(model, J_grid, n_w, ctrl, threads):
    results = meanfield.continuation_in_J(model, J_grid, ctrl=ctrl,
                                          n_w=n_w, threads=threads)
    for r in results:
        yield (r.J, r.kappa, r.E_T1, r.residual, int(r.converged))


def _cmd_continuation(cfg: RunConfig) -> list[str]:
    blk = cfg.block
    J_grid = np.linspace(0.0, float(blk["J_max"]), int(blk["n_points"]))
    write_csv(cfg.output_dir / "curve.csv", "J,kappa,E_T1,residual,converged",
              _continuation_rows(cfg.model, J_grid, int(blk["n_w"]),
                                 cfg.tolerances, cfg.threads))
    return ["curve.csv"]


def _cmd_fig2(cfg: RunConfig) -> list[str]:
    blk = cfg.block
    model = cfg.model
    J_grid = np.linspace(0.0, float(blk["J_max"]), int(blk["n_points"]))
    write_csv(cfg.output_dir / "curve.csv", "J,kappa,E_T1,residual,converged",
              _continuation_rows(model, J_grid, int(blk["n_w"]),
                                 cfg.tolerances, cfg.threads))
    part = build_partition(model, ctrl=cfg.tolerances)
    kern = stationary.build_kernel(model, part, n_w=int(blk["n_w"]),
                                   ctrl=cfg.tolerances, threads=cfg.threads)
    mu = stationary.invariant_density(kern, cfg.tolerances)
    ins = blk["inset"]
    lift = stationary.lift_to_plane(
        model, part, mu,
        (float(ins["v_lo"]), float(ins["v_hi"]), int(ins["nv"]),
         float(ins["w_lo"]), float(ins["w_hi"]), int(ins["nw"])),
        ctrl=cfg.tolerances, threads=cfg.threads)
    write_csv(cfg.output_dir / "inset_density.csv", "v,w,density",
              lift_rows(lift))
    return ["curve.csv", "inset_density.csv"]


_BODIES = {
    "check-assumptions": _cmd_check,
    "simulate-linear": _cmd_simulate_linear,
    "simulate-network": _cmd_network,
    "simulate-mkv": _cmd_mkv,
    "stationary": _cmd_stationary,
    "certify": _cmd_certify,
    "continuation": _cmd_continuation,
    "reproduce-fig2": _cmd_fig2,
}


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mkv-neuro",
        description="spiking-neuron jump-process simulator and "
                    "invariant-measure toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", default=None)
        sp.add_argument("--output-dir", default=None)
    return ap


def run(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    t_start = time.time()
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    try:
        cfg = validate_config(doc, args.command, overrides)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    try:
        outputs = _BODIES[args.command](cfg)
    except NUMERICAL_ERRORS as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    manifest = {
        "command": args.command,
        "config": cfg.raw,
        "resolved_block": cfg.block,
        "defaulted_fields": cfg.defaulted,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "versions": {
            "package": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
        "wall_time_s": round(time.time() - t_start, 3),
        "outputs": outputs,
    }
    write_json(cfg.output_dir / "manifest.json", manifest)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
