"""Runs, convergence studies and cached reference solutions for the presets."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import euler
from .euler import InadmissibleStateError
from .limiter import TimestepTooLargeError, low_order_dt_bound
from .problems import ProblemSpec, preset_initial_conditions
from .sbp import Grid
from .solver import (
    IntegrationResult,
    Discretization,
    SchemeConfig,
    StepLog,
    integrate,
    integrate_adaptive,
    write_snapshot,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INADMISSIBLE = 3
EXIT_ABORTED = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    problem: str
    n: int
    scheme: SchemeConfig
    method: str
    dt: Optional[float]
    t_final: float
    atol: float = 1e-6
    rtol: float = 1e-4
    snapshot_times: list = field(default_factory=list)

    def spec(self) -> ProblemSpec:
        return preset_initial_conditions(self.problem)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = asdict(self.scheme)
        return d


_SCHEME_KEYS = {"name", "order", "low_flux", "surface_flux", "positivity", "alpha"}
_TIME_KEYS = {"method", "dt", "t_final", "atol", "rtol"}
_TOP_KEYS = {"problem", "n", "scheme", "time", "output"}
_OUTPUT_KEYS = {"snapshot_times"}


def _line_map(text: str) -> dict[tuple[str, ...], int]:
    """Map key paths of a YAML mapping document to 1-based line numbers."""
    out: dict[tuple[str, ...], int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = path + (str(k.value),)
                out[key] = k.start_mark.line + 1
                walk(v, key)

    try:
        walk(yaml.compose(text), ())
    except yaml.YAMLError:
        pass
    return out


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Validate a YAML run configuration; errors name the field and line."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from None
    lines = _line_map(text)

    def fail(path: tuple[str, ...], msg: str):
        line = lines.get(path)
        where = f"{source}:{line}" if line else source
        raise ConfigError(f"{where}: field '{'.'.join(path)}': {msg}")

    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    for key in raw:
        if key not in _TOP_KEYS:
            fail((key,), f"unknown key; expected one of {sorted(_TOP_KEYS)}")
    if "problem" not in raw:
        raise ConfigError(f"{source}: missing required field 'problem'")
    try:
        spec = preset_initial_conditions(raw["problem"])
    except ValueError as exc:
        fail(("problem",), str(exc))

    n = raw.get("n", spec.n)
    if not isinstance(n, int) or isinstance(n, bool) or n < 4:
        fail(("n",), f"must be an integer >= 4, got {n!r}")

    sch = raw.get("scheme", {}) or {}
    if not isinstance(sch, dict):
        fail(("scheme",), "must be a mapping")
    for key in sch:
        if key not in _SCHEME_KEYS:
            fail(("scheme", key), f"unknown key; expected one of {sorted(_SCHEME_KEYS)}")
    name = sch.get("name", spec.scheme)
    kwargs = dict(
        scheme=name,
        order=sch.get("order", 4),
        low_flux=sch.get("low_flux", default_low_flux(name)),
        surface_flux=sch.get("surface_flux", "hllc"),
        positivity=sch.get("positivity", spec.positivity and name in ("kl", "rkl")),
        alpha=sch.get("alpha", spec.alpha),
        boundary=spec.boundary,
    )
    if not isinstance(kwargs["order"], int) or not 2 <= kwargs["order"] <= 6:
        fail(("scheme", "order"), f"must be an integer in 2..6, got {kwargs['order']!r}")
    if not isinstance(kwargs["positivity"], bool):
        fail(("scheme", "positivity"), "must be true or false")
    if not isinstance(kwargs["alpha"], (int, float)):
        fail(("scheme", "alpha"), "must be a number")
    try:
        scheme = SchemeConfig(**kwargs)
    except ValueError as exc:
        msg = str(exc)
        bad = "positivity" if "positivity" in msg else "alpha" if "alpha" in msg else "name" if "scheme" in msg else "low_flux"
        fail(("scheme", bad), str(exc))

    tm = raw.get("time", {}) or {}
    if not isinstance(tm, dict):
        fail(("time",), "must be a mapping")
    for key in tm:
        if key not in _TIME_KEYS:
            fail(("time", key), f"unknown key; expected one of {sorted(_TIME_KEYS)}")
    method = tm.get("method", spec.method)
    if method not in ("rk4", "ssprk43", "adaptive"):
        fail(("time", "method"), f"must be rk4, ssprk43 or adaptive, got {method!r}")
    if scheme.positivity and method == "rk4":
        fail(("time", "method"), "positivity limiting needs ssprk43 or adaptive")
    dt = tm.get("dt", spec.step_size(n))
    if method != "adaptive":
        if not isinstance(dt, (int, float)) or isinstance(dt, bool) or dt <= 0:
            fail(("time", "dt"), f"fixed step methods need a positive dt, got {dt!r}")
        dt = float(dt)
    t_final = tm.get("t_final", spec.t_final)
    if not isinstance(t_final, (int, float)) or t_final <= 0:
        fail(("time", "t_final"), f"must be a positive number, got {t_final!r}")
    atol, rtol = spec.tolerances or (1e-6, 1e-4)
    atol = tm.get("atol", atol)
    rtol = tm.get("rtol", rtol)
    for key, val in (("atol", atol), ("rtol", rtol)):
        if not isinstance(val, (int, float)) or val <= 0:
            fail(("time", key), f"must be a positive number, got {val!r}")

    out = raw.get("output", {}) or {}
    if not isinstance(out, dict):
        fail(("output",), "must be a mapping")
    for key in out:
        if key not in _OUTPUT_KEYS:
            fail(("output", key), f"unknown key; expected one of {sorted(_OUTPUT_KEYS)}")
    snaps = out.get("snapshot_times", [])
    if not isinstance(snaps, list) or not all(isinstance(s, (int, float)) for s in snaps):
        fail(("output", "snapshot_times"), "must be a list of times")
    return RunConfig(raw["problem"], n, scheme, method, dt, float(t_final), float(atol), float(rtol), sorted(float(s) for s in snaps))


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


# ---------------------------------------------------------------------------
# running


def setup(spec: ProblemSpec, n: int, scheme: SchemeConfig) -> tuple[Discretization, np.ndarray]:
    grid = Grid.uniform(n, spec.domain, periodic=spec.periodic)
    u0 = spec.initial(grid.coordinates())
    exterior = u0 if scheme.boundary == "dirichlet" else None
    return Discretization(grid, scheme, exterior), u0


def default_low_flux(scheme: str) -> str:
    """Limiting blends toward HLLC; the viscosity schemes keep LxF as their low order partner."""
    return "hllc" if scheme in ("kl", "rkl") else "lxf"


def scheme_for(spec: ProblemSpec, scheme: Optional[str] = None, order: int = 4, **kw) -> SchemeConfig:
    name = scheme or spec.scheme
    low = kw.pop("low_flux", default_low_flux(name))
    positivity = kw.pop("positivity", spec.positivity and name in ("kl", "rkl"))
    return SchemeConfig(scheme=name, order=order, low_flux=low, positivity=positivity,
                        alpha=kw.pop("alpha", spec.alpha), boundary=spec.boundary, **kw)


def simulate(
    spec: ProblemSpec,
    n: int,
    scheme: SchemeConfig,
    method: Optional[str] = None,
    dt: Optional[float] = None,
    t_final: Optional[float] = None,
    tolerances: Optional[tuple[float, float]] = None,
    callback=None,
    stage_hook=None,
    log: Optional[StepLog] = None,
) -> tuple[Discretization, IntegrationResult]:
    disc, u0 = setup(spec, n, scheme)
    method = method or spec.method
    T = spec.t_final if t_final is None else t_final
    if method == "adaptive":
        atol, rtol = tolerances or spec.tolerances or (1e-6, 1e-4)
        res = integrate_adaptive(disc, u0, T, atol, rtol, callback=callback, stage_hook=stage_hook, log=log)
    else:
        h = dt if dt is not None else spec.step_size(n)
        res = integrate(disc, u0, T, h, method, callback=callback, stage_hook=stage_hook, log=log)
    return disc, res


def l2_error(mass: np.ndarray, u: np.ndarray, u_exact: np.ndarray) -> float:
    """Mass-weighted discrete L2 norm of the error over all conserved variables."""
    e = np.asarray(u) - np.asarray(u_exact)
    return float(np.sqrt(np.sum(mass[:, None] * e * e)))


def run(config: RunConfig | str | Path, out: Optional[str | Path] = None) -> int:
    """Execute a configured run and write snapshots, a step log and diagnostics.

    Returns a process exit code: 0 on success, 3 if a state became
    inadmissible, 4 if the run aborted for another numerical reason.
    """
    cfg = load_config(config) if not isinstance(config, RunConfig) else config
    spec = cfg.spec()
    out_dir = Path(out or f"runs/{cfg.problem}")
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "run_log.jsonl"
    log_path.write_text("")
    log = StepLog(path=log_path)
    (out_dir / "config.json").write_text(json.dumps(cfg.as_dict(), indent=2))

    disc, u0 = setup(spec, cfg.n, cfg.scheme)
    write_snapshot(out_dir / "snapshot_initial.csv", disc.grid, u0, cfg.scheme.gamma)
    diag_rows = [disc.diagnostics(u0, 0.0).as_dict()]
    pending = list(cfg.snapshot_times)

    def callback(k, t, u):
        while pending and t >= pending[0] - 1e-12:
            write_snapshot(out_dir / f"snapshot_t{pending.pop(0):.6g}.csv", disc.grid, u, cfg.scheme.gamma)

    t0 = time.perf_counter()
    try:
        if cfg.method == "adaptive":
            res = integrate_adaptive(disc, u0, cfg.t_final, cfg.atol, cfg.rtol, callback=callback, log=log)
        else:
            res = integrate(disc, u0, cfg.t_final, cfg.dt, cfg.method, callback=callback, log=log)
    except InadmissibleStateError as exc:
        log.add(event="abort", reason=f"inadmissible: {exc}")
        logger.error("run aborted: %s", exc)
        return EXIT_INADMISSIBLE
    except (TimestepTooLargeError, RuntimeError) as exc:
        log.add(event="abort", reason=str(exc))
        logger.error("run aborted: %s", exc)
        return EXIT_ABORTED
    wall = time.perf_counter() - t0
    write_snapshot(out_dir / "snapshot_final.csv", disc.grid, res.u, cfg.scheme.gamma)
    final = disc.diagnostics(res.u, res.t).as_dict()
    final["wall_time"] = wall
    final["steps"] = res.steps
    final["rejected"] = res.rejected
    if spec.exact is not None:
        final["l2_error"] = l2_error(disc.mass, res.u, spec.exact(disc.grid.coordinates(), res.t))
    diag_rows.append(final)
    with open(out_dir / "diagnostics.csv", "w", newline="") as fh:
        keys = list(final)
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in diag_rows:
            w.writerow({k: json.dumps(row[k]) if isinstance(row.get(k), list) else row.get(k, "") for k in keys})
    log.add(event="done", t=res.t, steps=res.steps, wall_time=wall)
    return EXIT_OK


# ---------------------------------------------------------------------------
# convergence


@dataclass
class ConvergenceRow:
    order: int
    n: int
    error: float
    rate: Optional[float]


@dataclass
class ConvergenceReport:
    scheme: str
    rows: list[ConvergenceRow]

    def error(self, order: int, n: int) -> float:
        for r in self.rows:
            if r.order == order and r.n == n:
                return r.error
        raise KeyError((order, n))

    def finest_rate(self, order: int) -> Optional[float]:
        rows = [r for r in self.rows if r.order == order]
        return rows[-1].rate if rows else None

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "n", "error", "rate"])
            for r in self.rows:
                w.writerow([r.order, r.n, f"{r.error:.6e}", "" if r.rate is None else f"{r.rate:.4f}"])
        return path


def _convergence_point(args) -> float:
    problem, scheme, order, n, dt = args
    spec = preset_initial_conditions(problem)
    disc, res = simulate(spec, n, scheme_for(spec, scheme, order), dt=dt)
    return l2_error(disc.mass, res.u, spec.exact(disc.grid.coordinates(), res.t))


def worker_count() -> int:
    cpus = os.cpu_count() or 1
    try:
        cap = int(os.environ.get("ESFD_THREADS", cpus))
    except ValueError:
        logger.warning("ignoring non-integer ESFD_THREADS=%r", os.environ["ESFD_THREADS"])
        cap = cpus
    return max(1, min(cap, cpus))


def rates(errors: Sequence[float], grids: Sequence[int]) -> list[Optional[float]]:
    """``log(e_{k-1}/e_k) / log(n_k/n_{k-1})``; defined only across doublings."""
    out: list[Optional[float]] = [None]
    for k in range(1, len(errors)):
        if grids[k] != 2 * grids[k - 1]:
            out.append(None)
            continue
        out.append(float(np.log2(errors[k - 1] / errors[k])))
    return out


def convergence_study(
    problem: str = "density_wave",
    scheme: str = "ecav",
    orders: Sequence[int] = (2, 3, 4, 5),
    grids: Sequence[int] = (16, 32, 64, 128, 256, 512),
    dt: Optional[float] = None,
    workers: Optional[int] = None,
) -> ConvergenceReport:
    spec = preset_initial_conditions(problem)
    if spec.exact is None:
        raise ValueError(f"problem {problem!r} has no analytic solution")
    grids = sorted(grids)
    jobs = [(problem, scheme, N, n, dt) for N in orders for n in grids]
    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            errs = list(pool.map(_convergence_point, jobs))
    else:
        errs = [_convergence_point(j) for j in jobs]
    rows = []
    for k, N in enumerate(orders):
        e = errs[k * len(grids) : (k + 1) * len(grids)]
        for n, err, rate in zip(grids, e, rates(e, grids)):
            rows.append(ConvergenceRow(N, n, err, rate))
    return ConvergenceReport(scheme, rows)


# ---------------------------------------------------------------------------
# reference solutions


def cache_dir() -> Path:
    return Path(os.environ.get("ESFD_CACHE", Path.home() / ".cache" / "esfd"))


def reference_solution(
    problem: str,
    n: int,
    order: int = 4,
    cache: Optional[str | Path] = None,
    cfl: float = 0.4,
) -> tuple[np.ndarray, np.ndarray]:
    """Fine-grid low order solution ``(x, u)`` at the preset final time.

    The low order scheme with the HLLC flux is run with SSPRK(4,3) at a fraction of its forward Euler
    bound.  Results are cached under a hash of the configuration; an
    unreadable cache entry is recomputed.
    """
    spec = preset_initial_conditions(problem)
    if spec.dim != 1:
        raise ValueError("reference solutions are provided for 1D problems only")
    low = "hllc"
    key = json.dumps({"problem": problem, "n": n, "order": order, "low": low, "cfl": cfl, "t": spec.t_final, "v": 1}, sort_keys=True)
    digest = hashlib.sha256(key.encode()).hexdigest()[:16]
    folder = Path(cache) if cache is not None else cache_dir()
    path = folder / f"reference_{problem}_{n}_{digest}.npz"
    if path.exists():
        try:
            with np.load(path) as data:
                x, u = data["x"], data["u"]
            if x.shape == (n,) and u.shape == (n, 3) and np.all(np.isfinite(u)):
                return x, u
        except Exception as exc:  # corrupt or truncated cache entry
            logger.warning("discarding unreadable reference cache %s: %s", path, exc)
        path.unlink(missing_ok=True)

    scheme = SchemeConfig(scheme="low", order=order, low_flux=low, boundary=spec.boundary)
    disc, u0 = setup(spec, n, scheme)
    u = u0.copy()
    t = 0.0
    while t < spec.t_final * (1 - 1e-14):
        ui, uj, nh = disc._pairs(u)
        lam = euler.max_wavespeed(ui, uj, nh, disc.gamma, check=False)
        # SSPRK(4,3) is a chain of forward Euler substeps of dt/2
        dt = min(2.0 * cfl * low_order_dt_bound(disc.table, lam, disc.mass), spec.t_final - t)
        res = integrate(disc, u, dt, dt, "ssprk43")
        u = res.u
        t += dt
    x = disc.grid.coordinates()[:, 0]
    folder.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, x=x, u=u)
    os.replace(tmp, path)
    return x, u


def shock_position(x: np.ndarray, rho: np.ndarray, ahead: float, factor: float = 1.5) -> float:
    """Rightmost location where density exceeds ``factor * ahead``, interpolated linearly."""
    idx = np.flatnonzero(rho > factor * ahead)
    if len(idx) == 0:
        raise ValueError("no shock found")
    k = idx[-1]
    if k + 1 >= len(x):
        return float(x[k])
    lvl = factor * ahead
    w = (rho[k] - lvl) / (rho[k] - rho[k + 1])
    return float(x[k] + w * (x[k + 1] - x[k]))


def local_maxima(x: np.ndarray, y: np.ndarray, lo: float, hi: float, prominence: float = 0.0) -> np.ndarray:
    """Positions of strict local maxima of ``y`` with ``lo <= x <= hi``."""
    from scipy.signal import find_peaks

    peaks, _ = find_peaks(y, prominence=prominence)
    xp = x[peaks]
    return xp[(xp >= lo) & (xp <= hi)]
