"""HTTP service around the extraction engine.

Every endpoint returns a report document (see :mod:`frwmw.report`).  The
``run_*`` functions do the work and are shared with the command line,
which calls them in-process unless pointed at a server.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, ConfigDict, Field

from .engine import Config, Engine, extract
from .geometry import StructureError, parse_structure
from .oracle import err_avg, extrapolated_reference, reference_capacitance
from .report import make_report
from .sgf import SGFCache
from .suites import bench_scaling, validate_sgf

_DEFAULTS = Config()
MW_SLOPE = (1.7, 2.3)
FDM_SLOPE_MIN = 4.0
SPEEDUP_MIN = 10.0


class EngineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid_n: int = _DEFAULTS.grid_n
    expansion: float = _DEFAULTS.expansion
    mode: str = _DEFAULTS.mode
    rel_std_tol: float = _DEFAULTS.rel_std_tol
    min_walks: int = _DEFAULTS.min_walks
    max_walks: int = _DEFAULTS.max_walks
    batch: int = _DEFAULTS.batch
    seed: int = _DEFAULTS.seed
    snap_tol: float = _DEFAULTS.snap_tol
    hop_cap: int = _DEFAULTS.hop_cap
    gaussian_gap_fraction: float = _DEFAULTS.gaussian_gap_fraction
    world_margin: float = _DEFAULTS.world_margin
    memoize: bool = _DEFAULTS.memoize
    cache_capacity: Optional[int] = _DEFAULTS.cache_capacity
    solver: str = _DEFAULTS.solver

    def build(self) -> Config:
        return Config(**self.model_dump())


class ExtractRequest(BaseModel):
    structure: Dict[str, Any]
    config: EngineConfig = Field(default_factory=EngineConfig)
    threads: Optional[int] = None
    omit_timings: bool = False
    cache_path: Optional[str] = None


class OracleCompareRequest(ExtractRequest):
    resolution: int = 32
    extrapolate: bool = True
    threshold: float = 0.05


class ValidateRequest(BaseModel):
    n: int = 4
    grids: int = 20
    samples: int = 1_000_000
    seed: int = 0
    step_grids: int = 10
    step_transits: int = 100_000
    kind: str = "voxel"


class BenchRequest(BaseModel):
    n_list: List[int] = [8, 16, 32, 64]
    fdm_n_list: List[int] = [8, 16, 32]
    speedup_n: Optional[int] = 24
    transits: int = 2000
    reps: int = 5
    seed: int = 0


class Report(BaseModel):
    schema_version: str
    command: str
    config: Dict[str, Any]
    results: Dict[str, Any]
    passed: Optional[bool] = None


class RequestError(ValueError):
    """Bad input; maps to exit code 2 / HTTP 422."""


# --------------------------------------------------------------------------
# work


def _structure(doc, margin):
    try:
        return parse_structure(json.dumps(doc), world_margin=margin)
    except StructureError as e:
        raise RequestError(str(e)) from e


def _config(req: ExtractRequest) -> Config:
    try:
        return req.config.build()
    except ValueError as e:
        raise RequestError(str(e)) from e


def _load_cache(path, n, cfg):
    if path and Path(path).exists():
        cache = SGFCache.load(path, capacity=cfg.cache_capacity, method=cfg.solver)
        if cache.n != n:
            raise RequestError(f"cache file {path} holds n={cache.n}, config needs n={n}")
        return cache
    return SGFCache(n, cfg.cache_capacity, cfg.solver)


def _echo(req: ExtractRequest, cfg: Config):
    return {"engine": cfg.to_dict(), "structure": req.structure, "threads": req.threads or 1}


def _extract(req: ExtractRequest, caches=None):
    cfg = _config(req)
    s = _structure(req.structure, cfg.world_margin)
    if req.cache_path:
        cache = _load_cache(req.cache_path, cfg.grid_n, cfg)
    elif caches is not None:
        cache = caches.setdefault(cfg.grid_n, SGFCache(cfg.grid_n, cfg.cache_capacity, cfg.solver))
    else:
        cache = None
    try:
        engine = Engine(s, cfg, cache, threads=req.threads)
    except ValueError as e:
        raise RequestError(str(e)) from e
    result = extract(s, cfg, engine=engine)
    if req.cache_path:
        engine.cache.save(req.cache_path)
    return s, cfg, result


def run_extract(req: ExtractRequest, caches=None) -> dict:
    _, cfg, result = _extract(req, caches)
    return make_report("extract", _echo(req, cfg), result.to_dict(timings=not req.omit_timings))


def run_oracle_compare(req: OracleCompareRequest, caches=None) -> dict:
    s, cfg, result = _extract(req, caches)
    if req.extrapolate:
        ref = extrapolated_reference(s, req.resolution)
    else:
        ref = reference_capacitance(s, req.resolution)
    nc = len(s.conductors)
    ref_row = ref.row(s.master_id)
    err = err_avg(result.values[:nc], ref_row[:nc])
    rel = (result.values - ref_row) / np.abs(ref_row)
    entries = [
        {"terminal": t, "frw": float(v), "std_err": float(e), "reference": float(r), "rel_error": float(q)}
        for t, v, e, r, q in zip(result.terminals, result.values, result.std_errs, ref_row, rel)
    ]
    config = _echo(req, cfg)
    config["oracle"] = {"resolution": req.resolution, "extrapolate": req.extrapolate, "threshold": req.threshold}
    results = {
        "entries": entries,
        "err_avg": err,
        "threshold": req.threshold,
        "reference_mesh": list(ref.resolution),
        "extraction": result.to_dict(timings=not req.omit_timings),
    }
    return make_report("oracle-compare", config, results, passed=err <= req.threshold)


def run_validate_sgf(req: ValidateRequest) -> dict:
    if req.samples < 10_000:
        raise RequestError("samples must be >= 1e4")
    out = validate_sgf(req.n, req.grids, req.samples, req.seed, req.step_grids, req.step_transits, req.kind)
    return make_report("validate-sgf", req.model_dump(), out, passed=out["pass"])


def run_bench_scaling(req: BenchRequest) -> dict:
    out = bench_scaling(tuple(req.n_list), tuple(req.fdm_n_list), req.transits, req.reps, req.seed,
                        speedup_n=req.speedup_n)
    checks = {}
    for k in ("steps_slope", "microwalk_slope"):
        if k in out:
            checks[k] = MW_SLOPE[0] <= out[k] <= MW_SLOPE[1]
    if "fdm_slope" in out:
        checks["fdm_slope"] = out["fdm_slope"] >= FDM_SLOPE_MIN
    if "speedup" in out:
        checks["speedup"] = out["speedup"]["speedup"] >= SPEEDUP_MIN
    out["limits"] = {"slope_range": list(MW_SLOPE), "fdm_slope_min": FDM_SLOPE_MIN, "speedup_min": SPEEDUP_MIN}
    out["checks"] = checks
    return make_report("bench-scaling", req.model_dump(), out, passed=all(checks.values()))


# --------------------------------------------------------------------------
# app

app = FastAPI(title="frwmw", version="0.1.0")
app.state.caches = {}


def _guard(fn, *args):
    try:
        return fn(*args)
    except RequestError as e:
        raise HTTPException(status_code=422, detail=str(e))


@app.get("/health")
def health():
    return {"status": "ok", "threads": int(os.environ.get("FRWMW_THREADS", "1"))}


def _no_paths(req: ExtractRequest):
    # the server keeps its own warm caches; clients may not name server files
    if req.cache_path:
        raise HTTPException(status_code=422, detail="cache_path is only accepted in-process")


@app.post("/extract", response_model=Report, response_model_exclude_none=True)
def extract_endpoint(req: ExtractRequest):
    _no_paths(req)
    return _guard(run_extract, req, app.state.caches)


@app.post("/oracle-compare", response_model=Report, response_model_exclude_none=True)
def oracle_compare_endpoint(req: OracleCompareRequest):
    _no_paths(req)
    return _guard(run_oracle_compare, req, app.state.caches)


@app.post("/validate-sgf", response_model=Report, response_model_exclude_none=True)
def validate_endpoint(req: ValidateRequest):
    return _guard(run_validate_sgf, req)


@app.post("/bench-scaling", response_model=Report, response_model_exclude_none=True)
def bench_endpoint(req: BenchRequest):
    return _guard(run_bench_scaling, req)
