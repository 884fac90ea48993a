"""Command-line front end: ``chainexit <subcommand> --model PATH [--seed U64] [--threads K] [--out DIR]``.

Every run writes its artifacts plus ``manifest_<command>.json`` into ``--out``.
Numeric files carry no timestamps, so reruns with the same inputs are
byte-identical regardless of ``--threads``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .domain import Domain
from .expr import ExprError
from .model import ModelError, load_model
from .montecarlo import ExitProblem
from .sde import BlowUpError

__all__ = ["main", "build_parser", "RunManifest", "EXIT_OK", "EXIT_CONFIG", "EXIT_BLOWUP",
           "EXIT_RUNTIME"]

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_BLOWUP = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def _finite(obj):
    """JSON-safe copy: non-finite floats become ``None``, numpy scalars become Python ones."""
    if isinstance(obj, dict):
        return {str(k): _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_finite(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    version: str = __version__
    argv: list = field(default_factory=list)
    started: str = ""
    finished: str = ""
    outputs: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"command": self.command, "config_hash": self.config_hash, "seed": self.seed,
                "version": self.version, "argv": self.argv, "started": self.started,
                "finished": self.finished, "outputs": sorted(self.outputs)}


def _stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def config_hash(model_cfg, args: argparse.Namespace) -> str:
    """SHA-256 of the model config and every option that can change numeric output."""
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in ("threads", "out", "func", "argv")}
    blob = json.dumps({"model": model_cfg, "options": opts}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ----------------------------------------------------------------- helpers

def _problem(model, args) -> ExitProblem:
    kw = {}
    if getattr(args, "ell", None) is not None:
        kw["ell"] = args.ell
    if getattr(args, "domain", None):
        text = args.domain
        if os.path.exists(text):
            with open(text, encoding="utf-8") as fh:
                text = fh.read()
        kw["domain"] = Domain.from_json(json.loads(text))
    if getattr(args, "horizon", None):
        kw["horizon"] = tuple(args.horizon)
    if getattr(args, "init", None):
        kw["init"] = tuple(args.init)
    return ExitProblem.from_model(model, **kw)


def _threads(args) -> int:
    return args.threads if args.threads else (os.cpu_count() or 1)


class _Run:
    def __init__(self, args, model_cfg):
        self.args = args
        os.makedirs(args.out, exist_ok=True)
        self.manifest = RunManifest(command=args.command, config_hash=config_hash(model_cfg, args),
                                    seed=args.seed, argv=list(args.argv), started=_stamp())

    def path(self, name: str) -> str:
        self.manifest.outputs.append(name)
        return os.path.join(self.args.out, name)

    def close(self) -> None:
        self.manifest.finished = _stamp()
        write_json(os.path.join(self.args.out, f"manifest_{self.args.command}.json"),
                   self.manifest.to_json())


# --------------------------------------------------------------- commands

def cmd_simulate(args, model, run: _Run) -> None:
    from .sde import detect_exit, integrate_deterministic, simulate_chain

    pb = _problem(model, args)
    deltas = [0.0] + list(args.delta or [])
    noiseless = args.eps == 0 and not any(v > 0 for v in deltas)
    events = []
    for p in range(args.paths):
        if noiseless:
            tr = integrate_deterministic(model, pb.init, pb.horizon, args.dt, ell=pb.ell)
        else:
            tr = simulate_chain(model, args.eps, deltas, pb.init, pb.horizon, args.dt,
                                seed=args.seed, stream=p, ell=pb.ell)
        tr.to_csv(run.path(f"trajectory_{p:04d}.csv"))
        ev = detect_exit(tr, pb.domain, pb.ell, model, tol=args.tol)
        events.append(dict(ev.to_json(), path=p))
    write_json(run.path("exits.json"), {"eps": args.eps, "deltas": deltas[1:], "dt": args.dt,
                                        "seed": args.seed, "problem": pb.to_json(), "events": events})


def cmd_estimate(args, model, run: _Run) -> None:
    from .montecarlo import estimate_exit_probability

    pb = _problem(model, args)
    est = estimate_exit_probability(pb, args.eps, args.delta, args.N, args.dt, args.seed,
                                    _threads(args), tol=args.tol, bridge=not args.no_bridge)
    write_json(run.path("estimate.json"), dict(est.to_json(), problem=pb.to_json()))


def cmd_delta_study(args, model, run: _Run) -> None:
    from .montecarlo import delta_convergence_study

    pb = _problem(model, args)
    st = delta_convergence_study(pb, args.eps, args.deltas, args.N, args.dt, args.seed, _threads(args))
    st.to_csv(run.path("delta_study.csv"))
    write_json(run.path("delta_study.json"),
               {"problem": pb.to_json(), "eps": args.eps, "rows": st.rows(),
                "gaps_non_increasing": all(b <= a for a, b in zip(st.gaps, st.gaps[1:])),
                "final_gap_within_2se": st.gaps[-2] <= 2 * st.estimates[-1].stderr
                if len(st.gaps) > 1 else True})


def cmd_solve_pde(args, model, run: _Run) -> None:
    from .pde import PdeGrid, solve_bvp, weak_residual

    pb = _problem(model, args)
    K = args.K if len(args.K) == 3 else args.K * 3
    grid = PdeGrid(K_t=K[0], K1=K[1], K2=K[2], R=args.R, k=args.k)
    sol = solve_bvp(pb, args.eps, args.delta2, grid)
    if args.residual:
        sol.residual = weak_residual(sol, model, args.eps).to_json()
    sol.save(run.path("pde_v.bin"))
    run.manifest.outputs.append("pde_v.bin.json")
    v0 = float(sol.probe(pb.horizon[0], *pb.init)[0])
    write_json(run.path("pde_summary.json"), {"problem": pb.to_json(), "v_init": v0,
                                              **sol.metadata()})


def cmd_min_action(args, model, run: _Run) -> None:
    from .action import NoFeasiblePathError, minimize_action

    pb = _problem(model, args)
    try:
        path = minimize_action(pb, M=args.M, restarts=args.restarts, seed=args.seed,
                               threads=_threads(args))
    except NoFeasiblePathError as err:
        err.best.save(os.path.join(args.out, "action"), model.d)
        run.manifest.outputs += ["action.csv", "action.json"]
        raise
    path.save(os.path.join(args.out, "action"), model.d)
    run.manifest.outputs += ["action.csv", "action.json"]


def cmd_dp_oracle(args, model, run: _Run) -> None:
    from .action import DPGrid, dp_self_convergence

    pb = _problem(model, args)
    grid = DPGrid(K_t=args.K[0], K1=args.K[1], K2=args.K[2], n_u=args.n_u)
    sc = dp_self_convergence(pb, grid)
    tab = sc.pop("table")
    tab.save(run.path("dp_table.bin"))
    run.manifest.outputs.append("dp_table.bin.json")
    write_json(run.path("dp_oracle.json"), dict(sc, problem=pb.to_json(), gate_passed=sc["change"] <= 0.05))


def _read_I0(value: str) -> float:
    if os.path.exists(value):
        with open(value, encoding="utf-8") as fh:
            obj = json.load(fh)
        for key in ("action", "I0"):
            if key in obj:
                return float(obj[key])
        raise ConfigError(f"{value}: no 'action' or 'I0' field")
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"--i0 must be a number or a JSON file, got {value!r}") from None


def cmd_sweep(args, model, run: _Run) -> None:
    from .asymptotics import epsilon_sweep

    pb = _problem(model, args)
    I0 = _read_I0(args.i0) if args.i0 is not None else None
    sw = epsilon_sweep(pb, args.eps, N_min=args.N_min, N_max=args.N_max, deltas=args.delta,
                       dt=args.dt, seed=args.seed, I0=I0, threads=_threads(args),
                       restarts=args.restarts)
    sw.to_csv(run.path("sweep.csv"))
    write_json(run.path("sweep.json"),
               {"problem": pb.to_json(), "I0": sw.I0, "I0_dp": sw.I0_dp, "I0_dp_change": sw.I0_dp_gap,
                "rows": [dict(r.as_dict(), half_width=r.half_width, unreliable=r.unreliable,
                              pilot_q=r.pilot_q) for r in sw.rows],
                "gaps_strictly_decreasing": sw.gaps_strictly_decreasing()})


def cmd_penalty_sweep(args, model, run: _Run) -> None:
    from .asymptotics import penalty_sweep

    pb = _problem(model, args)
    ps = penalty_sweep(pb, args.eps, args.M, args.N, args.dt, args.seed, threads=_threads(args))
    write_json(run.path("penalty_sweep.json"), dict(ps.to_json(), problem=pb.to_json()))


def cmd_report(args, model, run: _Run) -> None:
    from .asymptotics import SweepResult, bounds_check

    sw = SweepResult.from_csv(args.sweep)
    I0 = _read_I0(args.i0) if args.i0 is not None else sw.I0
    sw = sw.with_I0(I0)
    rep = bounds_check(sw)
    write_json(run.path("bounds_report.json"),
               dict(rep.to_json(), gaps_strictly_decreasing=sw.gaps_strictly_decreasing()))
    with open(run.path("gap_vs_eps.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["eps", "gap", "half_width", "I_eps", "I0", "usable"])
        for r in sw.rows:
            w.writerow([repr(r.eps), repr(r.gap), repr(r.half_width), repr(r.I_eps), repr(r.I0),
                        int(r.usable)])


def cmd_validate(args, model, run: _Run) -> None:
    from .model import SampleSpec, rank_chain_check, validate_regularity

    sp = SampleSpec(count=args.samples)
    reg = validate_regularity(model, sp)
    rk = rank_chain_check(model, sp)
    write_json(run.path("validate.json"), {
        "model": model.to_config(),
        "regularity": {"max_drift_derivative": reg.max_drift_derivative,
                       "min_sigma_eig": reg.min_sigma_eig, "worst_point": list(reg.worst_point),
                       "lambda_floor": reg.lambda_floor, "passed": reg.passed},
        "rank": {"pair_min_rank": {f"{a}-{b}": r for (a, b), r in rk.pair_min_rank.items()},
                 "first_subsystem_min_rank": {str(k): v for k, v in rk.first_subsystem_min_rank.items()},
                 "flagged": {f"{a}-{b}": pts for (a, b), pts in rk.flagged.items()},
                 "passed": rk.passed}})


# ----------------------------------------------------------------- parser

def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _pos_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _common(model_required: bool = True) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--model", required=model_required,
                   help="model JSON file or built-in name (lin2, ou2, det-exit)")
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--threads", type=_pos_int, default=None,
                   help="worker cap (default: available cores); never changes results")
    p.add_argument("--out", default=".", help="output directory")
    return p


def _problem_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--ell", type=int, default=None, help="target subsystem")
    p.add_argument("--domain", default=None, help="domain JSON (inline or file)")
    p.add_argument("--horizon", type=float, nargs=2, metavar=("S", "T"), default=None)
    p.add_argument("--init", type=float, nargs="+", default=None)
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chainexit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"chainexit {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    base, prob = _common(), _problem_flags()

    def add(name, func, help_, parents=(base, prob)):
        p = sub.add_parser(name, parents=list(parents), help=help_)
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "write sample trajectories and their exit events")
    p.add_argument("--eps", type=float, default=0.0)
    p.add_argument("--delta", type=float, nargs="*", default=None, help="noise on subsystems 2..ell")
    p.add_argument("--paths", type=_pos_int, default=1)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-6)

    p = add("estimate", cmd_estimate, "Monte Carlo exit probability")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--delta", type=float, nargs="*", default=None)
    p.add_argument("--N", type=_pos_int, default=100_000)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--no-bridge", action="store_true", help="disable the Brownian-bridge crossing test")

    p = add("delta-study", cmd_delta_study, "exit probability along a regularisation schedule")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--deltas", type=float, nargs="+", default=[1e-1, 1e-2, 1e-3, 0.0])
    p.add_argument("--N", type=_pos_int, default=100_000)
    p.add_argument("--dt", type=float, default=1e-3)

    p = add("solve-pde", cmd_solve_pde, "finite-difference exit probability (ell = 2, d = 1)")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--delta2", type=float, default=1e-3)
    p.add_argument("--K", type=int, nargs="+", default=[128], help="K or K_t K1 K2")
    p.add_argument("--R", type=float, default=None)
    p.add_argument("--k", type=float, default=100.0, help="terminal mollification index")
    p.add_argument("--residual", action="store_true", help="also report the weak residual")

    p = add("min-action", cmd_min_action, "minimum action path by direct transcription")
    p.add_argument("--M", type=int, default=16)
    p.add_argument("--restarts", type=_pos_int, default=16)

    p = add("dp-oracle", cmd_dp_oracle, "dynamic-programming action with a grid-doubling gate")
    p.add_argument("--K", type=int, nargs=3, default=[8, 64, 64], metavar=("K_T", "K1", "K2"))
    p.add_argument("--n-u", dest="n_u", type=int, default=33)

    p = add("sweep", cmd_sweep, "exit-rate sweep over decreasing eps")
    p.add_argument("--eps", type=float, nargs="+", default=[1.0, 0.5, 0.25])
    p.add_argument("--N-min", dest="N_min", type=_pos_int, default=100_000)
    p.add_argument("--N-max", dest="N_max", type=_pos_int, default=1_000_000)
    p.add_argument("--delta", type=float, nargs="*", default=None)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--i0", default=None, help="reference action (number or action JSON)")
    p.add_argument("--restarts", type=_pos_int, default=16)

    p = add("penalty-sweep", cmd_penalty_sweep, "terminal-penalty functional for increasing M")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--M", type=float, nargs="+", default=[10.0, 50.0, 100.0])
    p.add_argument("--N", type=_pos_int, default=100_000)
    p.add_argument("--dt", type=float, default=1e-3)

    p = add("report", cmd_report, "bounds verdict and gap-vs-eps table from a sweep",
            parents=(_common(model_required=False),))
    p.add_argument("--sweep", required=True, help="sweep.csv")
    p.add_argument("--i0", default=None, help="reference action (number or action JSON)")

    p = add("validate", cmd_validate, "sampled regularity and rank checks", parents=(base,))
    p.add_argument("--samples", type=_pos_int, default=4096)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = ap.parse_args(argv)
    args.argv = argv
    try:
        model = load_model(args.model) if args.model else None
        cfg = model.to_config() if model is not None else None
        run = _Run(args, cfg)
    except (ModelError, ExprError, ConfigError, ValueError, OSError, KeyError) as err:
        ap.print_usage(sys.stderr)
        print(f"chainexit: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.func(args, model, run)
    except BlowUpError as err:
        print(f"chainexit: blow-up: {err}", file=sys.stderr)
        return EXIT_BLOWUP
    except (ModelError, ExprError, ConfigError, KeyError, OSError, json.JSONDecodeError) as err:
        print(f"chainexit: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as err:
        print(f"chainexit: invalid input: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as err:
        print(f"chainexit: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if "run" in locals():
            run.close()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
