"""Experiment configs, lambda/p sweeps and result emitters.

One experiment builds a head model and a single noisy observation, then runs
every (method, p, lambda, seed) cell on that same observation. Cells are
cached on disk under ``<output_dir>/cells/<config hash>/`` so an interrupted
sweep resumes where it stopped.
"""

import csv
import hashlib
import io
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import deep_prior, headmodel, linear, simulate
from . import io as nio

log = logging.getLogger(__name__)

METHODS = ("mne", "sloreta", "deep_prior")
WORKERS_ENV = "NEUROLOC_WORKERS"
RESULTS_CSV_FIELDS = ("method", "p", "lambda", "seed", "status", "localization_error_mm",
                      "argmax_index", "argmax_x_mm", "argmax_y_mm", "argmax_z_mm")
DP_OVERRIDE_KEYS = ("iterations", "learning_rate", "beta1", "beta2", "eps", "init_scale",
                    "snapshot_every")


def default_lambda_grid(method):
    if method == "deep_prior":
        return [0.0] + [float(x) for x in np.logspace(-3, 3, 12)]
    return [float(x) for x in np.logspace(-4, 4, 13)]


@dataclass
class HeadModelConfig:
    sphere_radius_mm: float = 90.0
    region_radius_mm: float = 70.0
    grid_spacing_mm: float = 10.0
    n_sensors: int = 60
    sensor_shell_radius_mm: float = 120.0
    coverage_fraction: float = 0.5


@dataclass
class SourceConfig:
    nearest_to: list = field(default_factory=lambda: [0.0, 0.0, 50.0])
    moment: list = field(default_factory=lambda: [50.0, 0.0, 0.0])
    label: str = ""


@dataclass
class NoiseConfig:
    target_psnr_db: float = 21.6
    seed: int = 0
    cov_shape: str = "identity"
    psnr_mode: str = "rms"


@dataclass
class SolverConfig:
    method: str
    lambda_grid: list = None
    p_grid: list = None
    dp: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lambda_grid is None:
            self.lambda_grid = default_lambda_grid(self.method)
        if self.p_grid is None:
            self.p_grid = [0.0] if self.method == "sloreta" else [0.0, 0.5]
        self.lambda_grid = [float(x) for x in self.lambda_grid]
        self.p_grid = [float(x) for x in self.p_grid]


@dataclass
class ExperimentConfig:
    headmodel: HeadModelConfig = field(default_factory=HeadModelConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    solvers: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "results"
    name: str = ""

    def validate(self):
        if not self.solvers:
            raise ValueError("config has no solvers")
        for s in self.solvers:
            if s.method not in METHODS:
                raise ValueError(f"unknown method {s.method!r}; expected one of {METHODS}")
            grid = s.lambda_grid
            if not grid:
                raise ValueError(f"{s.method}: lambda_grid is empty")
            if any(not math.isfinite(x) or x < 0 for x in grid):
                raise ValueError(f"{s.method}: lambda values must be finite and >= 0")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError(f"{s.method}: lambda_grid must be strictly increasing")
            if not s.p_grid or any(p < 0 for p in s.p_grid):
                raise ValueError(f"{s.method}: p_grid must be non-empty and >= 0")
            if s.method == "sloreta" and s.p_grid != [0.0]:
                raise ValueError("sloreta does not use depth weighting; set p_grid = [0]")
            unknown = set(s.dp) - set(DP_OVERRIDE_KEYS)
            if unknown:
                raise ValueError(f"{s.method}: unknown deep-prior options {sorted(unknown)}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be unique")
        hm = self.headmodel
        if not 0 < hm.region_radius_mm < hm.sphere_radius_mm < hm.sensor_shell_radius_mm:
            raise ValueError("need 0 < region radius < sphere radius < sensor shell radius")
        if np.linalg.norm(self.source.moment) == 0:
            raise ValueError("source moment must be non-zero")
        return self

    def to_dict(self, include_output=True):
        d = asdict(self)
        if not include_output:
            d.pop("output_dir")
        return d

    def config_hash(self):
        blob = json.dumps(_jsonable(self.to_dict(include_output=False)), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        solvers = [SolverConfig(**s) for s in d.pop("solvers", [])]
        noise = dict(d.pop("noise", {}))
        if isinstance(noise.get("target_psnr_db"), str):
            noise["target_psnr_db"] = float(noise["target_psnr_db"])
        return cls(
            headmodel=HeadModelConfig(**d.pop("headmodel", {})),
            source=SourceConfig(**d.pop("source", {})),
            noise=NoiseConfig(**noise),
            solvers=solvers,
            **d,
        ).validate()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def load_config(path):
    """Read an experiment config from TOML (or JSON), or ``builtin:<name>``."""
    path = str(path)
    if path.startswith("builtin:"):
        return builtin_config(path.split(":", 1)[1])
    p = Path(path)
    if p.suffix == ".json":
        data = json.loads(p.read_text())
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        data = tomllib.loads(p.read_text())
    return ExperimentConfig.from_dict(data)


ANALOG_DIRECTION = (0.6, 0.3, 0.75)
ANALOG_DEPTH = {"shallow-analog": 0.75, "deep-analog": 0.35}
# one decade apart; a full default grid would take ~30 min per config on one core
ANALOG_DP_LAMBDAS = [0.0, 10.0, 100.0, 1000.0]


def analog_source(depth_fraction, region_radius_mm=70.0, moment_nam=50.0,
                  direction=ANALOG_DIRECTION, label=""):
    """Tangential dipole on a fixed ray at ``depth_fraction`` of the region radius."""
    d = np.asarray(direction, dtype=np.float64)
    d /= np.linalg.norm(d)
    t = np.cross(d, [0.0, 0.0, 1.0])
    t /= np.linalg.norm(t)
    return SourceConfig(nearest_to=[float(v) for v in d * depth_fraction * region_radius_mm],
                        moment=[float(v) for v in t * moment_nam], label=label)


def builtin_config(name, **overrides):
    """``shallow-analog`` or ``deep-analog``: dipole at 0.75x or 0.35x region radius."""
    if name not in ANALOG_DEPTH:
        raise ValueError(f"unknown builtin config {name!r}; choose from {sorted(ANALOG_DEPTH)}")
    hm = HeadModelConfig()
    cfg = ExperimentConfig(
        headmodel=hm,
        source=analog_source(ANALOG_DEPTH[name], hm.region_radius_mm, label=name),
        noise=NoiseConfig(),
        solvers=[SolverConfig("mne", p_grid=[0.0, 0.5]),
                 SolverConfig("sloreta"),
                 SolverConfig("deep_prior", lambda_grid=ANALOG_DP_LAMBDAS, p_grid=[0.5])],
        seeds=[0, 1, 2],
        output_dir=f"results/{name}",
        name=name,
    )
    return replace(cfg, **overrides).validate()


# --------------------------------------------------------------------------


@dataclass
class Problem:
    space: object
    lead: object
    truth: simulate.GroundTruthSource
    obs: simulate.Observation


def build_problem(cfg):
    hm = cfg.headmodel
    space, _, lead = headmodel.build_head_model(
        hm.sphere_radius_mm, hm.region_radius_mm, hm.grid_spacing_mm, hm.n_sensors,
        hm.sensor_shell_radius_mm, hm.coverage_fraction)
    truth = simulate.make_dipole(space, cfg.source.nearest_to, cfg.source.moment,
                                 cfg.source.label)
    clean = simulate.forward(lead, truth)
    nz = cfg.noise
    obs = simulate.add_noise(clean, nz.target_psnr_db, nz.cov_shape, nz.seed, nz.psnr_mode)
    return Problem(space=space, lead=lead, truth=truth, obs=obs)


def build_truth(cfg):
    """Source space and ground-truth dipole without computing a lead field."""
    hm = cfg.headmodel
    space = headmodel.build_source_space(hm.sphere_radius_mm, hm.region_radius_mm,
                                         hm.grid_spacing_mm, min_radius=0.5 * hm.grid_spacing_mm)
    truth = simulate.make_dipole(space, cfg.source.nearest_to, cfg.source.moment,
                                 cfg.source.label)
    return space, truth


def cell_key(method, p, lam, seed):
    s = "none" if seed is None else str(seed)
    return f"{method}__p{p!r}__lam{lam!r}__seed{s}".replace("-", "m")


def enumerate_cells(cfg):
    cells = []
    for s in cfg.solvers:
        seeds = cfg.seeds if s.method == "deep_prior" else [None]
        for p in s.p_grid:
            for lam in s.lambda_grid:
                for seed in seeds:
                    cells.append((s.method, p, lam, seed, dict(s.dp)))
    return cells


def solve_cell(problem, method, p, lam, seed, dp_options=None):
    """Run one solver cell; returns ``(CurrentEstimate, TraceLog or None)``."""
    if method == "mne":
        return linear.mne_solve(problem.lead, problem.obs, linear.depth_weights(problem.lead, p),
                                lam), None
    if method == "sloreta":
        return linear.sloreta_solve(problem.lead, problem.obs, lam), None
    if method == "deep_prior":
        opts = dict(dp_options or {})
        dcfg = deep_prior.DeepPriorConfig(lam=lam, p=p, seed=seed, **opts)
        net = deep_prior.build_generator(problem.space, seed=seed, init_scale=dcfg.init_scale)
        weights = linear.depth_weights(problem.lead, p)
        return deep_prior.fit(net, problem.lead, problem.obs, weights, dcfg)
    raise ValueError(f"unknown method {method!r}")


def _run_cell(problem, cell_dir, cell):
    method, p, lam, seed, dp_options = cell
    key = cell_key(method, p, lam, seed)
    row = {"method": method, "p": p, "lambda": lam, "seed": seed, "key": key}
    t0 = time.perf_counter()
    try:
        est, trace = solve_cell(problem, method, p, lam, seed, dp_options)
        loc = linear.localize(est, problem.space)
        k = int(np.argmax(est.per_point_amplitude))
        row.update(status="ok",
                   localization_error_mm=linear.localization_error(loc, problem.truth),
                   argmax_index=k, argmax_point=[float(v) for v in loc])
        nio.save_estimate(est, cell_dir / f"{key}.est", extra={"key": key})
        row["estimate"] = f"{key}.est"
        if trace is not None:
            trace.to_csv(cell_dir / f"{key}.trace.csv")
            row["trace"] = f"{key}.trace.csv"
    except Exception as exc:  # recorded per cell, the sweep continues
        row.update(status=f"error: {type(exc).__name__}: {exc}",
                   localization_error_mm=None, argmax_index=None, argmax_point=None)
    row["runtime_s"] = time.perf_counter() - t0
    nio._atomic_write(cell_dir / f"{key}.json", json.dumps(_jsonable(row), sort_keys=True),
                      mode="w")
    return row


_WORKER_PROBLEM = None


def _pool_init(problem):
    global _WORKER_PROBLEM
    _WORKER_PROBLEM = problem


def _pool_cell(args):
    cell_dir, cell = args
    return _run_cell(_WORKER_PROBLEM, cell_dir, cell)


def n_workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class SweepResult:
    config: dict
    config_hash: str
    truth: dict
    observation: dict
    rows: list
    best: list = field(default_factory=list)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=_row_sort_key)
        if not self.best:
            self.best = best_rows(self.rows)

    @property
    def all_ok(self):
        return all(r["status"] == "ok" for r in self.rows)

    def to_dict(self):
        return _jsonable(asdict(self))

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        nio._atomic_write(out / "results.json",
                          json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", mode="w")
        nio._atomic_write(out / "results.csv", results_csv(self), mode="w")

    @classmethod
    def load(cls, path):
        path = Path(path)
        d = json.loads(path.read_text())
        stored_best = d.pop("best")
        res = cls(**d)
        for fresh, old in zip(res.best, stored_best):
            if fresh["median_error_mm"] != old["median_error_mm"]:
                raise ValueError(f"{path}: stored best row for {old['method']} does not "
                                 "match the minimum over its grid")
        if len(res.best) != len(stored_best):
            raise ValueError(f"{path}: best-row table does not match the cell rows")
        res.source_path = path
        return res

    def series(self, method, p):
        return [r for r in self.rows if r["method"] == method and r["p"] == p]


def _row_sort_key(r):
    seed = -1 if r["seed"] is None else r["seed"]
    return (r["method"], r["p"], r["lambda"], seed)


def _group_errors(rows):
    """{(method, p): {lambda: [errors of ok cells]}} in sorted order."""
    groups = {}
    for r in sorted(rows, key=_row_sort_key):
        g = groups.setdefault((r["method"], r["p"]), {})
        errs = g.setdefault(r["lambda"], [])
        if r["status"] == "ok":
            errs.append(r["localization_error_mm"])
    return groups


def best_rows(rows):
    """Per (method, p): lambda with the smallest median error (smallest lambda on ties)."""
    out = []
    for (method, p), by_lam in _group_errors(rows).items():
        best = None
        for lam, errs in by_lam.items():
            if not errs:
                continue
            med = float(statistics.median(errs))
            if best is None or med < best["median_error_mm"]:
                best = {"method": method, "p": p, "lambda": lam, "median_error_mm": med,
                        "n_seeds": len(errs)}
        if best is not None:
            out.append(best)
    return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def results_csv(result):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_CSV_FIELDS)
    for r in result.rows:
        pt = r.get("argmax_point") or [None, None, None]
        w.writerow([r["method"], _fmt(r["p"]), _fmt(r["lambda"]), _fmt(r["seed"]), r["status"],
                    _fmt(r["localization_error_mm"]), _fmt(r["argmax_index"]),
                    _fmt(pt[0]), _fmt(pt[1]), _fmt(pt[2])])
    return buf.getvalue()


def run_experiment(cfg, output_dir=None, workers=None, progress=None):
    """Run every cell of ``cfg`` (reusing cached cells) and write the results.

    Writes ``results.json``, ``results.csv``, ``observation.{json,bin}`` and
    per-cell estimate/trace files into the output directory.
    """
    cfg.validate()
    out = Path(output_dir or cfg.output_dir)
    chash = cfg.config_hash()
    cell_dir = out / "cells" / chash
    cell_dir.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    nio.save_observation(problem.obs, out / "observation", extra={"config_hash": chash})

    rows, todo = [], []
    for cell in enumerate_cells(cfg):
        key = cell_key(*cell[:4])
        cached = cell_dir / f"{key}.json"
        if cached.exists():
            rows.append(json.loads(cached.read_text()))
        else:
            todo.append(cell)
    log.info("%d cells cached, %d to run", len(rows), len(todo))

    workers = workers or n_workers()
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_pool_init,
                                 initargs=(problem,)) as pool:
            for row in pool.map(_pool_cell, [(cell_dir, c) for c in todo]):
                rows.append(row)
                if progress:
                    progress(row)
    else:
        for cell in todo:
            row = _run_cell(problem, cell_dir, cell)
            rows.append(row)
            if progress:
                progress(row)

    truth = {"location": problem.truth.location, "moment": problem.truth.moment,
             "index": problem.truth.index, "label": problem.truth.label}
    observation = {"psnr_db": problem.obs.psnr_db, "rng_seed": problem.obs.rng_seed,
                   "file": "observation"}
    result = SweepResult(config=cfg.to_dict(), config_hash=chash, truth=_jsonable(truth),
                         observation=_jsonable(observation), rows=_jsonable(rows))
    result.write(out)
    return result


# --------------------------------------------------------------------------
# emitters


def emit_table(result):
    """Best-lambda table, one row per (method, p); returns ``(text, csv_text)``.

    Rows are sorted by method name, then median error, then p. Columns:
    method, p, best_lambda, median_error_mm, n_seeds.
    """
    rows = sorted(result.best, key=lambda b: (b["method"], b["median_error_mm"], b["p"]))
    header = ("method", "p", "best_lambda", "median_error_mm", "n_seeds")
    body = [(b["method"], f"{b['p']:g}", f"{b['lambda']:.4g}", f"{b['median_error_mm']:.2f}",
             str(b["n_seeds"])) for b in rows]
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
    lines.append(f"config_hash: {result.config_hash}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for b in rows:
        w.writerow([b["method"], repr(b["p"]), repr(b["lambda"]), repr(b["median_error_mm"]),
                    b["n_seeds"]])
    w.writerow([f"# config_hash={result.config_hash}"])
    return "\n".join(lines) + "\n", buf.getvalue()


def emit_sweep_plotdata(result):
    """Error-vs-lambda series per (method, p) with median/min/max over seeds.

    Returns ``(series, csv_text)``; ``series`` maps ``"<method>/p=<p>"`` to
    parallel lists keyed ``lambda``, ``median``, ``min``, ``max``, ``n``.
    """
    series = {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "p", "lambda", "median_error_mm", "min_error_mm", "max_error_mm",
                "n_seeds"])
    for (method, p), by_lam in _group_errors(result.rows).items():
        s = {"method": method, "p": p, "lambda": [], "median": [], "min": [], "max": [], "n": []}
        for lam in sorted(by_lam):
            errs = by_lam[lam]
            if not errs:
                continue
            vals = (float(statistics.median(errs)), float(min(errs)), float(max(errs)))
            s["lambda"].append(lam)
            s["median"].append(vals[0])
            s["min"].append(vals[1])
            s["max"].append(vals[2])
            s["n"].append(len(errs))
            w.writerow([method, repr(p), repr(lam), *map(repr, vals), len(errs)])
        series[f"{method}/p={p:g}"] = s
    return series, buf.getvalue()


def amplitude_volume(est, space):
    vol = np.zeros(space.grid_dims)
    idx = space.lattice_indices()
    vol[idx[:, 0], idx[:, 1], idx[:, 2]] = est.per_point_amplitude
    return vol


def emit_slices(est, space, truth):
    """Three amplitude planes through the argmax point plus truth-marker indices.

    ``xz`` is the plane at the argmax y (rows x, columns z), ``yz`` the plane
    at the argmax x (rows y, columns z), ``xy`` the plane at the argmax z
    (rows x, columns y). Markers give the truth's (row, col) in each plane.
    """
    vol = amplitude_volume(est, space)
    k = int(np.argmax(est.per_point_amplitude))
    ix, iy, iz = (int(v) for v in space.lattice_indices()[k])
    t = np.rint((truth.location - space.origin) / space.grid_spacing).astype(int)
    return {
        "argmax_index": [ix, iy, iz],
        "argmax_point": [float(v) for v in space.points[k]],
        "truth_index": [int(v) for v in t],
        "planes": {
            "xz": {"fixed_axis": "y", "fixed_index": iy, "grid": vol[:, iy, :],
                   "truth_marker": [int(t[0]), int(t[2])]},
            "yz": {"fixed_axis": "x", "fixed_index": ix, "grid": vol[ix, :, :],
                   "truth_marker": [int(t[1]), int(t[2])]},
            "xy": {"fixed_axis": "z", "fixed_index": iz, "grid": vol[:, :, iz],
                   "truth_marker": [int(t[0]), int(t[1])]},
        },
    }


def write_slices(slices, out_dir, prefix="slice"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, plane in slices["planes"].items():
        path = out / f"{prefix}_{name}.csv"
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"# plane={name}", f"{plane['fixed_axis']}_index={plane['fixed_index']}",
                    f"truth_row={plane['truth_marker'][0]}",
                    f"truth_col={plane['truth_marker'][1]}"])
        for row in plane["grid"]:
            w.writerow([repr(float(v)) for v in row])
        path.write_text(buf.getvalue())
        written.append(path)
    meta = {k: v for k, v in slices.items() if k != "planes"}
    meta["planes"] = {n: {k: v for k, v in p.items() if k != "grid"}
                      for n, p in slices["planes"].items()}
    (out / f"{prefix}_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return written
