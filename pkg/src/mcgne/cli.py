"""Command-line entry point.

Exit codes: 0 success, 1 certificate rejected, 2 certificate advisory only
(sampled constants), 3 iteration budget exhausted, 4 divergence, 64 invalid
configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import config as cfg
from .certify import CertificationError, certify
from .energynet import cluster_distance_errors, estimate_error_of, intra_cluster_errors
from .oracle import OracleError, centralized_vgne, relative_error_trace
from .solver import TRACE_COLUMNS, DivergenceError, LockstepError, kkt_residual, run

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_ADVISORY = 2
EXIT_MAX_ITERS = 3
EXIT_DIVERGED = 4
EXIT_BAD_CONFIG = 64

log = logging.getLogger("mcgne")


# -- output helpers ------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy to builtins, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, data) -> None:
    atomic_write(path, json.dumps(_clean(data), indent=2, sort_keys=False) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([_fmt(v) for v in row])
    atomic_write(path, buf.getvalue())


def trace_csv(path: Path, trace) -> None:
    header = list(TRACE_COLUMNS) + (["lockstep_gap"] if trace.lockstep_gap else [])
    write_csv(path, header, ([r[h] for h in header] for r in trace.rows()))


# -- commands ------------------------------------------------------------------------

class _Context:
    def __init__(self, args):
        self.args = args
        raw = cfg.load(args.config) if args.config else cfg.default_config(args.seed or 0)
        self.raw = raw
        self.built = cfg.build_game(raw.get("game", {"type": "energynet"}), args.seed)
        self.spec = self.built.spec
        self.steps = cfg.build_steps(raw.get("steps"), self.spec)
        out = args.out or raw.get("output", {}).get("dir") or "out"
        self.out = Path(out)

    def solver_options(self, **extra):
        a = self.args
        return cfg.build_solver_options(self.raw.get("solver"), max_iters=a.max_iters, tol_fixed_point=a.tol,
                                        realization=a.realization, **extra)


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def cmd_certify(ctx: _Context) -> int:
    sec = ctx.raw.get("certify", {})
    mode = sec.get("mode", "exact" if ctx.spec.payoffs.is_quadratic else "sampled")
    try:
        cert = certify(ctx.spec, ctx.steps, mode=mode, connectivity=sec.get("connectivity", "combined"),
                       samples=sec.get("samples", 1000), seed=sec.get("seed", 0))
    except CertificationError as exc:
        raise cfg.ConfigError(str(exc)) from None
    doc = cert.to_dict()
    doc["steps"] = ctx.steps.to_dict()
    doc["ok"] = cert.ok
    write_json(ctx.out / "certificate.json", doc)
    _say(ctx.args, f"c = {cert.c:g}, c_min = {cert.c_min:.6g} ({'ok' if cert.c_ok else 'too small'}); "
                   f"max step = {cert.step_verdict.max_step:g}, 1/ell_A = {cert.step_verdict.limit:.6g} "
                   f"({'ok' if cert.steps_ok else 'too large'})")
    if not cert.ok:
        return EXIT_REJECTED
    return EXIT_OK if cert.constants.certified else EXIT_ADVISORY


def _final_doc(ctx: _Context, trace) -> dict:
    s = trace.final
    kkt = kkt_residual(ctx.spec, s)
    return {
        "status": trace.status,
        "converged": trace.converged,
        "iterations": trace.iterations,
        "x": s.x_hat[ctx.spec.layout.r_index],
        "kkt_residual": {"r1": kkt.r1, "r2": kkt.r2, "r3": kkt.r3},
        "state": s.to_dict(),
    }


def _solve(ctx: _Context, **extra):
    opts = ctx.solver_options(**extra)
    return run(ctx.spec, ctx.steps, opts)


def cmd_solve(ctx: _Context) -> int:
    trace = _solve(ctx)
    trace_csv(ctx.out / "trace.csv", trace)
    write_json(ctx.out / "final.json", _final_doc(ctx, trace))
    _say(ctx.args, f"{trace.status} after {trace.iterations} iterations")
    return EXIT_OK if trace.converged else EXIT_MAX_ITERS


def _oracle(ctx: _Context):
    sec = ctx.raw.get("oracle", {})
    return centralized_vgne(ctx.spec, tol=sec.get("tol", 1e-11), max_iters=sec.get("max_iters", 2_000_000))


def cmd_oracle(ctx: _Context) -> int:
    res = _oracle(ctx)
    write_json(ctx.out / "oracle.json", res.to_dict())
    _say(ctx.args, f"oracle {'converged' if res.converged else 'stopped'} after {res.iterations} iterations, "
                   f"residual {res.residual:.3e}")
    return EXIT_OK if res.converged else EXIT_MAX_ITERS


def cmd_compare(ctx: _Context) -> int:
    ref = _oracle(ctx)
    trace = _solve(ctx, keep_iterates=True)
    rel = relative_error_trace(trace, ref)
    spec = ctx.spec
    x_hat = trace.final.x_hat
    x = x_hat[spec.layout.r_index]
    d = spec.dims
    last_j, last_i = d.m - 1, d.cluster_sizes[-1] - 1
    summary = {
        "status": trace.status,
        "iterations": trace.iterations,
        "final_relative_error": float(rel.values[-1]),
        "relative_error_is_absolute": rel.absolute,
        "intra_cluster_error": intra_cluster_errors(spec, x),
        "distance_to_reference": cluster_distance_errors(spec, x, ref.x_star),
        "estimate_error_last_agent": estimate_error_of(spec, x_hat, ref.x_star, last_j, last_i),
        "oracle": ref.to_dict(),
    }
    trace_csv(ctx.out / "trace.csv", trace)
    write_json(ctx.out / "final.json", _final_doc(ctx, trace))
    write_csv(ctx.out / "relative_error.csv", ["k", "relative_error"], zip(rel.k.tolist(), rel.values))
    write_json(ctx.out / "compare.json", summary)
    _say(ctx.args, f"{trace.status} after {trace.iterations} iterations; final relative error {rel.values[-1]:.3e}")
    return EXIT_OK if trace.converged else EXIT_MAX_ITERS


def cmd_scenario(ctx: _Context) -> int:
    sc = ctx.built.scenario
    if sc is None:
        raise cfg.ConfigError("scenario needs an energynet game")
    game = {"type": "energynet", "seed": sc.seed, "data": sc.to_dict()}
    if "topology" in ctx.built.raw:
        game["topology"] = ctx.built.raw["topology"]
    doc = {"game": game, "steps": ctx.steps.to_dict()}
    for key in ("solver", "certify", "oracle"):
        if key in ctx.raw:
            doc[key] = ctx.raw[key]
    write_json(ctx.out / "scenario.json", doc)
    _say(ctx.args, f"wrote {ctx.out / 'scenario.json'}")
    return EXIT_OK


COMMANDS = {
    "certify": cmd_certify,
    "solve": cmd_solve,
    "oracle": cmd_oracle,
    "compare": cmd_compare,
    "scenario": cmd_scenario,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config (defaults to the seeded EI benchmark)")
    common.add_argument("--seed", type=int, help="scenario seed (overrides game.seed)")
    common.add_argument("--out", metavar="DIR", help="output directory (default: out)")
    common.add_argument("--max-iters", type=int, dest="max_iters")
    common.add_argument("--tol", type=float, help="fixed-point tolerance")
    common.add_argument("--realization", choices=["compact", "agent", "both"])
    common.add_argument("--quiet", action="store_true")
    p = argparse.ArgumentParser(prog="mcgne", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = _Context(args)
        return COMMANDS[args.command](ctx)
    except cfg.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except LockstepError as exc:
        print(f"lockstep failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OracleError as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_REJECTED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
