"""Command line client.

Runs the service functions in-process, or posts the same requests to a
running service with ``--server URL``.  The report goes to stdout (or
``--out``); a short summary goes to stderr.

Exit codes: 0 success, 1 a validation or comparison threshold failed,
2 bad usage or unreadable input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import service
from .engine import MODES, THREADS_ENV, Config
from .report import dumps

_D = Config()


def _csv_ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _engine_flags(p):
    p.add_argument("--structure", help="structure JSON file")
    p.add_argument("--config", help="replay the config echoed in an earlier report")
    p.add_argument("--grid-n", type=int, default=None, help=f"lattice size N (default {_D.grid_n})")
    p.add_argument("--expansion", type=float, default=None, help=f"MicroWalk-E expansion (default {_D.expansion:g})")
    p.add_argument("--mode", choices=sorted(MODES), default=None, help=f"transition mode (default {_D.mode})")
    p.add_argument("--tol", type=float, default=None, help=f"relative std-error target (default {_D.rel_std_tol:g})")
    p.add_argument("--min-walks", type=int, default=None, help=f"default {_D.min_walks}")
    p.add_argument("--max-walks", type=int, default=None, help=f"default {_D.max_walks}")
    p.add_argument("--batch", type=int, default=None, help=f"walks per batch (default {_D.batch})")
    p.add_argument("--seed", type=int, default=None, help=f"unsigned 64-bit seed (default {_D.seed})")
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("--cache", help="SGF cache file to load and update")
    p.add_argument("--omit-timings", action="store_true", help="leave wall-clock timings out of the report")


def _common(p, default):
    p.add_argument("--server", default=default, help="base URL of a running frwmw service")
    p.add_argument("--out", default=default, help="write the report here instead of stdout")


def build_parser():
    ap = argparse.ArgumentParser(prog="frwmw", description="Floating random walk capacitance extraction")
    _common(ap, None)
    sub = ap.add_subparsers(dest="command", required=True)
    # --server/--out are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _common(common, argparse.SUPPRESS)

    ex = sub.add_parser("extract", parents=[common], help="extract the master conductor's capacitance row")
    _engine_flags(ex)

    oc = sub.add_parser("oracle-compare", parents=[common], help="extract and compare with the full-domain FDM oracle")
    _engine_flags(oc)
    oc.add_argument("--resolution", type=int, default=32, help="oracle core resolution (default 32)")
    oc.add_argument("--no-extrapolate", action="store_true", help="single oracle mesh, no Richardson step")
    oc.add_argument("--threshold", type=float, default=0.05, help="Err_avg pass threshold (default 0.05)")

    va = sub.add_parser("validate-sgf", parents=[common], help="MicroWalk vs exact SGF suites on random grids")
    va.add_argument("--n", type=int, default=4)
    va.add_argument("--grids", type=int, default=20)
    va.add_argument("--samples", type=int, default=1_000_000)
    va.add_argument("--step-grids", type=int, default=10)
    va.add_argument("--step-transits", type=int, default=100_000)
    va.add_argument("--kind", choices=["voxel", "blocks"], default="voxel")
    va.add_argument("--seed", type=int, default=0)

    be = sub.add_parser("bench-scaling", parents=[common], help="time MicroWalk and FDM transitions across N")
    be.add_argument("--n-list", type=_csv_ints, default=[8, 16, 32, 64])
    be.add_argument("--fdm-n-list", type=_csv_ints, default=[8, 16, 32])
    be.add_argument("--speedup-n", type=int, default=24, help="N for the MicroWalk vs FDM speedup (0 skips)")
    be.add_argument("--transits", type=int, default=2000)
    be.add_argument("--reps", type=int, default=5)
    be.add_argument("--seed", type=int, default=0)
    return ap


class UsageError(Exception):
    pass


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read {what} {path}: {e.strerror}")
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} {path} is not JSON: {e}")


def _extract_request(args, cls):
    base = {}
    structure = None
    threads = None
    if args.config:
        rep = _read_json(args.config, "report")
        try:
            base = dict(rep["config"]["engine"])
            structure = rep["config"]["structure"]
            threads = rep["config"].get("threads")
        except (KeyError, TypeError):
            raise UsageError(f"{args.config} has no echoed extract config")
    if args.structure:
        structure = _read_json(args.structure, "structure file")
    if structure is None:
        raise UsageError("--structure (or --config) is required")
    flags = {
        "grid_n": args.grid_n, "expansion": args.expansion, "mode": args.mode, "rel_std_tol": args.tol,
        "min_walks": args.min_walks, "max_walks": args.max_walks, "batch": args.batch, "seed": args.seed,
    }
    base.update({k: v for k, v in flags.items() if v is not None})
    if args.threads is not None:
        threads = args.threads
    elif threads is None and os.environ.get(THREADS_ENV):
        threads = int(os.environ[THREADS_ENV])
    extra = {}
    if cls is service.OracleCompareRequest:
        extra = {"resolution": args.resolution, "extrapolate": not args.no_extrapolate, "threshold": args.threshold}
    return cls(structure=structure, config=service.EngineConfig(**base), threads=threads,
               omit_timings=args.omit_timings, cache_path=args.cache, **extra)


def _request(args):
    if args.command == "extract":
        return "/extract", _extract_request(args, service.ExtractRequest), service.run_extract
    if args.command == "oracle-compare":
        return "/oracle-compare", _extract_request(args, service.OracleCompareRequest), service.run_oracle_compare
    if args.command == "validate-sgf":
        req = service.ValidateRequest(n=args.n, grids=args.grids, samples=args.samples, seed=args.seed,
                                      step_grids=args.step_grids, step_transits=args.step_transits, kind=args.kind)
        return "/validate-sgf", req, service.run_validate_sgf
    req = service.BenchRequest(n_list=args.n_list, fdm_n_list=args.fdm_n_list, speedup_n=args.speedup_n or None,
                               transits=args.transits,
                               reps=args.reps, seed=args.seed)
    return "/bench-scaling", req, service.run_bench_scaling


def _remote(url, route, req):
    import httpx

    if getattr(req, "cache_path", None):
        raise UsageError("--cache cannot be used with --server")
    try:
        r = httpx.post(url.rstrip("/") + route, json=req.model_dump(), timeout=None)
    except httpx.HTTPError as e:
        raise UsageError(f"cannot reach {url}: {e}")
    if r.status_code == 422:
        raise UsageError(f"server rejected the request: {r.json().get('detail')}")
    r.raise_for_status()
    return r.json()


def _summary(report):
    res = report["results"]
    cmd = report["command"]
    lines = []
    if cmd in ("extract", "oracle-compare"):
        ex = res if cmd == "extract" else res["extraction"]
        lines.append(f"master {ex['master']}: {ex['walks']} walks, converged={ex['converged']}")
        for c in ex["capacitance"]:
            lines.append(f"  C[{ex['master']},{c['terminal']}] = {c['value']:.6e} F +- {c['std_err']:.2e}")
        if cmd == "oracle-compare":
            lines.append(f"  Err_avg = {res['err_avg']:.4f} (threshold {res['threshold']})")
    elif cmd == "validate-sgf":
        tvs = [g["tv"] for g in res["theorem"]["grids"]]
        lines.append(f"max TV {max(tvs):.4g}; steps ok={res['steps']['pass']}; "
                     f"E/N^2={res['uniform_ratio']['ratio']:.5f}; properties ok={res['properties']['pass']}")
    else:
        for k in ("steps_slope", "microwalk_slope", "fdm_slope"):
            if k in res:
                lines.append(f"{k} = {res[k]:.3f}")
        if "speedup" in res:
            lines.append(f"speedup at N={res['speedup']['N']}: {res['speedup']['speedup']:.1f}x")
    if report.get("passed") is not None:
        lines.append("PASS" if report["passed"] else "FAIL")
    return "\n".join(lines)


def run_cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        route, req, local = _request(args)
        report = _remote(args.server, route, req) if args.server else local(req)
    except (UsageError, service.RequestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    text = dumps(report)
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as e:
            print(f"error: cannot write {args.out}: {e.strerror}", file=sys.stderr)
            return 2
    else:
        sys.stdout.write(text)
    print(_summary(report), file=sys.stderr)
    return 1 if report.get("passed") is False else 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
