"""Semi-discrete blended schemes and explicit time integration.

The residual of node ``i`` is ``r_i = sum_j |n_ij| f_ij + |b_i| f_surf(u_i, u_ext, b_hat_i)``
and the ODE is ``M du/dt = -r``.  Edge fluxes are evaluated once per stored
pair and summed at every node in a fixed neighbour order.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import euler
from .euler import GAMMA, InadmissibleStateError, check_admissible
from .limiter import (
    CoefficientField,
    LimitingCoefficients,
    TimestepTooLargeError,
    assemble_ecav,
    assemble_kl,
    assemble_relaxed,
    entropy_violation,
    low_order_dt_bound,
    nodal_dot,
    nodal_limits,
    precise_entropy_variables,
    solve_knapsack_batch,
    symmetrize,
)
from .sbp import Grid, build_normal_table, build_operator

logger = logging.getLogger(__name__)

SCHEMES = ("ecav", "kl", "recav", "rkl", "high", "low")
BOUNDARIES = ("periodic", "dirichlet", "reflective")


@dataclass
class SchemeConfig:
    scheme: str = "ecav"
    order: int = 4
    low_flux: str = "hllc"
    surface_flux: str = "hllc"
    positivity: bool = False
    alpha: float = 0.5
    boundary: str = "periodic"
    gamma: float = GAMMA

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"unknown boundary {self.boundary!r}; choose from {BOUNDARIES}")
        if self.positivity and self.scheme not in ("kl", "rkl"):
            raise ValueError("positivity limiting is only available for the kl and rkl schemes")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        euler.get_flux(self.low_flux)
        euler.get_flux(self.surface_flux)

    @property
    def limited(self) -> bool:
        return self.scheme in ("kl", "rkl")


@dataclass
class StageRecord:
    """What the last residual evaluation decided; used by diagnostics and tests."""

    coefficients: Optional[CoefficientField] = None
    limits: Optional[LimitingCoefficients] = None
    a: Optional[np.ndarray] = None  # per-edge unrelaxed dissipation a_ij
    b: Optional[np.ndarray] = None  # per-node entropy violation
    scale: Optional[np.ndarray] = None
    boundary_flux: Optional[np.ndarray] = None  # total flux through the boundary
    slack: Optional[np.ndarray] = None  # a_i . theta_i - b_i, unrelaxed modes only


@dataclass
class Diagnostics:
    t: float
    total_conserved: np.ndarray
    total_entropy: float
    boundary_flux: np.ndarray
    min_density: float
    min_pressure: float
    max_entropy_residual: float = float("nan")

    def as_dict(self) -> dict:
        return {
            "t": self.t,
            "total_conserved": self.total_conserved.tolist(),
            "total_entropy": self.total_entropy,
            "boundary_flux": self.boundary_flux.tolist(),
            "min_density": self.min_density,
            "min_pressure": self.min_pressure,
            "max_entropy_residual": self.max_entropy_residual,
        }


class Discretization:
    """Operators, pair normals and boundary data for one grid and scheme.

    ``exterior`` supplies the fixed outside states for Dirichlet boundaries,
    either a full field (only boundary rows are read) or one state per
    boundary node.
    """

    def __init__(self, grid: Grid, config: SchemeConfig, exterior: Optional[np.ndarray] = None):
        if config.boundary == "periodic" and not all(grid.periodic):
            raise ValueError("periodic boundary requested on a bounded grid")
        if config.boundary != "periodic" and any(grid.periodic):
            raise ValueError(f"{config.boundary} boundary needs a bounded grid")
        self.grid = grid
        self.config = config
        self.gamma = config.gamma
        self.op = build_operator(config.order, grid)
        self.table = build_normal_table(self.op)
        self.mass = self.op.mass
        self.nvar = grid.dim + 2
        bn = np.linalg.norm(self.table.boundary, axis=1)
        self.boundary_nodes = np.flatnonzero(bn > 0)
        self.boundary_norm = bn[self.boundary_nodes]
        self.boundary_normal = self.table.boundary[self.boundary_nodes] / self.boundary_norm[:, None]
        self.exterior = None
        if config.boundary == "dirichlet":
            if exterior is None:
                raise ValueError("dirichlet boundary needs exterior states")
            exterior = np.asarray(exterior, dtype=float)
            if exterior.shape[0] == grid.n:
                exterior = exterior[self.boundary_nodes]
            if exterior.shape != (len(self.boundary_nodes), self.nvar):
                raise ValueError(f"exterior states have shape {exterior.shape}")
            check_admissible(exterior, self.gamma)
            self.exterior = exterior.copy()
        self._low = euler.get_flux(config.low_flux)
        self._surf = euler.get_flux(config.surface_flux)
        self.last = StageRecord()

    # -- pieces ---------------------------------------------------------

    def _pairs(self, u):
        return u[self.table.tail], u[self.table.head], self.table.unit_normals

    def scatter(self, edge_flux: np.ndarray) -> np.ndarray:
        """``sum_j |n_ij| f_ij`` from per-edge fluxes oriented tail to head."""
        return self.table.node_sum(self.table.norms[:, None] * edge_flux, signed=True)

    def high_flux(self, u: np.ndarray) -> np.ndarray:
        ui, uj, nh = self._pairs(u)
        return euler.flux_central(ui, uj, nh, self.gamma, check=False)

    def low_flux(self, u: np.ndarray) -> np.ndarray:
        ui, uj, nh = self._pairs(u)
        return self._low(ui, uj, nh, self.gamma, check=False)

    def boundary_states(self, u: np.ndarray) -> np.ndarray:
        ub = u[self.boundary_nodes]
        if self.config.boundary == "dirichlet":
            return self.exterior
        return euler.mirror_state(ub, self.boundary_normal)

    def boundary_surface_term(self, u: np.ndarray) -> np.ndarray:
        """Weak boundary contribution to ``r`` (zero for periodic grids)."""
        out = np.zeros_like(u)
        if len(self.boundary_nodes) == 0:
            return out
        ub = u[self.boundary_nodes]
        fs = self._surf(ub, self.boundary_states(u), self.boundary_normal, self.gamma, check=False)
        out[self.boundary_nodes] = self.boundary_norm[:, None] * fs
        return out

    def rhs_high_order(self, u: np.ndarray) -> np.ndarray:
        check_admissible(u, self.gamma)
        return -(self.scatter(self.high_flux(u)) + self.boundary_surface_term(u)) / self.mass[:, None]

    def rhs_low_order(self, u: np.ndarray) -> np.ndarray:
        check_admissible(u, self.gamma)
        return -(self.scatter(self.low_flux(u)) + self.boundary_surface_term(u)) / self.mass[:, None]

    def rhs_blended(self, u: np.ndarray, theta: np.ndarray, target: str = "low") -> np.ndarray:
        """Residual with ``f = f^H + theta * delta`` for a prescribed per-edge ``theta``.

        ``target="low"`` blends toward the low order flux, ``"viscosity"``
        adds ``theta (u_i - u_j)``.
        """
        check_admissible(u, self.gamma)
        fh = self.high_flux(u)
        theta = np.broadcast_to(np.asarray(theta, dtype=float), (self.table.n_edges,))
        if target == "low":
            delta = self.low_flux(u) - fh
        elif target == "viscosity":
            delta = u[self.table.tail] - u[self.table.head]
        else:
            raise ValueError(f"unknown blend target {target!r}")
        f = fh + theta[:, None] * delta
        return -(self.scatter(f) + self.boundary_surface_term(u)) / self.mass[:, None]

    # -- coefficients ---------------------------------------------------

    def _entropy_scale(self, v, psi, fh):
        t = self.table
        dv = v[t.head] - v[t.tail]
        s = t.norms * (np.sum(np.abs(dv * fh), axis=1) + np.sum(np.abs((psi[t.head] - psi[t.tail]) * t.unit_normals), axis=1))
        return 1.0 + t.node_sum(s)

    def _limits(self, u, fh, fl, surf, dt_fe):
        t = self.table
        r_low = self.scatter(fl) + surf
        g = t.norms[:, None] * (fh - fl)
        mask = t.slot_mask
        e = np.where(mask, t.slot_edge, 0)
        slot_g = g[e] * t.slot_sign[..., None]
        try:
            nodal = nodal_limits(u, r_low, slot_g, mask, self.mass, dt_fe, self.config.alpha, self.gamma)
        except TimestepTooLargeError:
            ui, uj, nh = self._pairs(u)
            lam = euler.max_wavespeed(ui, uj, nh, self.gamma, check=False)
            lam_b = None
            if len(self.boundary_nodes):
                lam_b = np.zeros(t.n_nodes)
                lam_b[self.boundary_nodes] = self.boundary_norm * euler.max_wavespeed(
                    u[self.boundary_nodes], self.boundary_states(u), self.boundary_normal, self.gamma, check=False
                )
            bound = low_order_dt_bound(t, lam, self.mass, lam_b)
            raise TimestepTooLargeError(
                f"low order update inadmissible with forward Euler step {dt_fe:.3e}", bound
            ) from None
        return LimitingCoefficients(np.maximum(nodal[t.tail], nodal[t.head]), self.config.alpha, nodal)

    def coefficients(self, u: np.ndarray, dt_fe: Optional[float] = None):
        """Per-edge coefficients and flux increments for the configured scheme.

        Returns ``(theta, delta, f_high)`` with the flux ``f = f^H + theta * delta``.
        """
        cfg = self.config
        t = self.table
        fh = self.high_flux(u)
        rec = StageRecord()
        if cfg.scheme == "high":
            self.last = rec
            return np.zeros(t.n_edges), np.zeros_like(fh), fh
        if cfg.scheme == "low":
            self.last = rec
            return np.ones(t.n_edges), self.low_flux(u) - fh, fh

        v = precise_entropy_variables(u, self.gamma)
        _, b = entropy_violation(t, u, self.gamma, v)
        rec.b = b
        rec.scale = self._entropy_scale(v.astype(float), euler.entropy_potential(u), fh)
        ell = None
        if cfg.limited:
            delta = self.low_flux(u) - fh
            if cfg.positivity:
                if dt_fe is None:
                    raise ValueError("positivity limiting needs the forward Euler step size")
                rec.limits = self._limits(u, fh, fh + delta, self.boundary_surface_term(u), dt_fe)
                ell = rec.limits.ell
        else:
            delta = u[t.tail] - u[t.head]

        def unrelaxed():
            if cfg.limited:
                batch, a_e = assemble_kl(t, v, fh, fh + delta, b, ell)
                return solve_knapsack_batch(batch.a, batch.b, batch.upper), a_e
            batch, a_e = assemble_ecav(t, u, v, b)
            return solve_knapsack_batch(batch.a, batch.b), a_e

        tau = None
        if cfg.scheme in ("ecav", "kl"):
            (theta_hat, ok), a_e = unrelaxed()
        else:
            batch = assemble_relaxed(t, v, delta, b, cfg.scheme, ell)
            theta_hat, ok = solve_knapsack_batch(batch.a, batch.b, batch.upper)
            # without a positive entry the relaxed problem is infeasible: solve unrelaxed there
            K = t.slot_edge.shape[1]
            fallback = ~ok & (batch.b > 0)
            if np.any(fallback):
                (fb_hat, fb_ok), _ = unrelaxed()
                theta_hat[fallback, :K] = fb_hat[fallback]
                theta_hat[fallback, K] = 0.0
                ok = ok | (fallback & fb_ok)
            tau = theta_hat[:, K].copy()
        if not np.all(ok):
            # a roundoff-sized violation with no dissipation available is harmless
            significant = ~ok & (b > 1e-12 * rec.scale)
            log = logger.warning if np.any(significant) else logger.debug
            log("%d infeasible knapsack rows (%d significant); using the bound on those rows",
                int(np.sum(~ok)), int(np.sum(significant)))
        theta = symmetrize(t, theta_hat)
        if ell is not None:
            theta = np.minimum(theta + ell, 1.0)
        if cfg.scheme in ("ecav", "kl"):
            rec.a = a_e
            rec.slack = nodal_dot(t, a_e, theta) - b
        rec.coefficients = CoefficientField(theta, cfg.scheme, tau)
        self.last = rec
        return theta, delta, fh

    # -- residual -------------------------------------------------------

    def rhs(self, u: np.ndarray, dt_fe: Optional[float] = None) -> np.ndarray:
        """``du/dt`` of the configured scheme; ``dt_fe`` is the forward Euler
        substep used for positivity limiting."""
        check_admissible(u, self.gamma)
        theta, delta, fh = self.coefficients(u, dt_fe)
        surf = self.boundary_surface_term(u)
        self.last.boundary_flux = surf.sum(axis=0)
        f = fh + theta[:, None] * delta
        return -(self.scatter(f) + surf) / self.mass[:, None]

    # -- diagnostics ----------------------------------------------------

    def diagnostics(self, u: np.ndarray, t: float = 0.0) -> Diagnostics:
        rho, _, p = euler.conservative_to_primitive(u, self.gamma)
        total = self.mass @ u
        with np.errstate(invalid="ignore", divide="ignore"):
            ent = float(self.mass @ euler.entropy(u, self.gamma))
        bflux = self.boundary_surface_term(u).sum(axis=0)
        res = float("nan")
        if self.config.scheme in ("ecav", "kl") and np.all(euler.is_admissible(u, self.gamma)):
            self.coefficients(u, None if not self.config.positivity else 0.0)
            slack = self.last.slack
            if slack is not None:
                res = float(np.max(-slack / self.last.scale))
        return Diagnostics(t, total, ent, bflux, float(rho.min()), float(p.min()), res)


# ---------------------------------------------------------------------------
# time integration


@dataclass
class StepLog:
    records: list = field(default_factory=list)
    path: Optional[Path] = None

    def add(self, **rec) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")


def _check_stage(disc: Discretization, u: np.ndarray, stage: str) -> None:
    if not np.all(euler.is_admissible(u, disc.gamma)):
        raise InadmissibleStateError(f"inadmissible state after {stage}")


def step(disc: Discretization, u: np.ndarray, dt: float, method: str = "rk4", stage_hook=None):
    """One explicit step; returns ``(u_new, boundary_flux_integral, error_estimate)``.

    ``boundary_flux_integral`` is the time integral of the total boundary flux
    over the step with the method's own weights, so that
    ``sum M u_new = sum M u - boundary_flux_integral`` exactly.
    """
    hook = stage_hook or (lambda d: None)
    if method == "rk4":
        if disc.config.positivity:
            raise ValueError("positivity limiting requires the ssprk43 method")
        k1 = disc.rhs(u); f1 = disc.last.boundary_flux; hook(disc)
        k2 = disc.rhs(u + 0.5 * dt * k1); f2 = disc.last.boundary_flux; hook(disc)
        k3 = disc.rhs(u + 0.5 * dt * k2); f3 = disc.last.boundary_flux; hook(disc)
        k4 = disc.rhs(u + dt * k3); f4 = disc.last.boundary_flux; hook(disc)
        u_new = u + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        flux = dt / 6.0 * (f1 + 2 * f2 + 2 * f3 + f4)
        _check_stage(disc, u_new, "rk4 step")
        return u_new, flux, None
    if method == "ssprk43":
        h = 0.5 * dt
        fe = h if disc.config.positivity else None
        L0 = disc.rhs(u, fe); F0 = disc.last.boundary_flux; hook(disc)
        u1 = u + h * L0
        _check_stage(disc, u1, "ssprk43 stage 1")
        L1 = disc.rhs(u1, fe); F1 = disc.last.boundary_flux; hook(disc)
        u2 = u1 + h * L1
        _check_stage(disc, u2, "ssprk43 stage 2")
        L2 = disc.rhs(u2, fe); F2 = disc.last.boundary_flux; hook(disc)
        w = u2 + h * L2
        u3 = (2.0 / 3.0) * u + (1.0 / 3.0) * w
        _check_stage(disc, u3, "ssprk43 stage 3")
        L3 = disc.rhs(u3, fe); F3 = disc.last.boundary_flux; hook(disc)
        u_new = u3 + h * L3
        _check_stage(disc, u_new, "ssprk43 step")
        flux = h / 3.0 * (F0 + F1 + F2) + h * F3
        # second order companion sharing the first three stages
        u_low = u / 3.0 + (2.0 / 3.0) * w
        return u_new, flux, u_new - u_low
    raise ValueError(f"unknown time integrator {method!r}")


@dataclass
class IntegrationResult:
    u: np.ndarray
    t: float
    steps: int
    rejected: int = 0
    boundary_flux_integral: Optional[np.ndarray] = None
    log: Optional[StepLog] = None


def integrate(
    disc: Discretization,
    u0: np.ndarray,
    t_final: float,
    dt: float,
    method: str = "rk4",
    callback: Optional[Callable] = None,
    stage_hook=None,
    log: Optional[StepLog] = None,
) -> IntegrationResult:
    """Fixed step integration; the last step is shortened to land on ``t_final``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = np.array(u0, dtype=float, copy=True)
    check_admissible(u, disc.gamma)
    nsteps = int(np.ceil(t_final / dt - 1e-9))
    t = 0.0
    flux_total = np.zeros(disc.nvar)
    for k in range(nsteps):
        h = min(dt, t_final - t) if k == nsteps - 1 else dt
        u, flux, _ = step(disc, u, h, method, stage_hook)
        flux_total += flux
        t = t_final if k == nsteps - 1 else t + h
        if log is not None:
            log.add(step=k + 1, t=t, dt=h)
        if callback is not None:
            callback(k + 1, t, u)
    return IntegrationResult(u, t, nsteps, 0, flux_total, log)


def error_norm(err: np.ndarray, u_old: np.ndarray, u_new: np.ndarray, atol: float, rtol: float) -> float:
    scale = atol + rtol * np.maximum(np.abs(u_old), np.abs(u_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def integrate_adaptive(
    disc: Discretization,
    u0: np.ndarray,
    t_final: float,
    atol: float = 1e-6,
    rtol: float = 1e-4,
    dt0: Optional[float] = None,
    dt_min: Optional[float] = None,
    max_steps: int = 10_000_000,
    callback: Optional[Callable] = None,
    stage_hook=None,
    log: Optional[StepLog] = None,
) -> IntegrationResult:
    """Error-controlled SSPRK(4,3) with an embedded second order estimate.

    Steps rejected by the error test, by an inadmissible stage or by the
    positivity limiter are retried with a smaller step.  The run aborts when
    the step falls below ``dt_min`` (default ``1e-14 * t_final``).
    """
    if atol <= 0 or rtol <= 0:
        raise ValueError("tolerances must be positive")
    dt_min = 1e-14 * t_final if dt_min is None else dt_min
    u = np.array(u0, dtype=float, copy=True)
    check_admissible(u, disc.gamma)
    t = 0.0
    if dt0 is None:
        ui, uj, nh = disc._pairs(u)
        lam = euler.max_wavespeed(ui, uj, nh, disc.gamma, check=False)
        dt0 = 0.1 * low_order_dt_bound(disc.table, lam, disc.mass)
    dt = min(dt0, t_final)
    steps = rejected = 0
    flux_total = np.zeros(disc.nvar)
    while t < t_final * (1 - 1e-14):
        if steps + rejected >= max_steps:
            raise RuntimeError(f"adaptive integration exceeded {max_steps} attempts at t = {t:.6e}")
        h = min(dt, t_final - t)
        try:
            u_new, flux, est = step(disc, u, h, "ssprk43", stage_hook)
            err = error_norm(est, u, u_new, atol, rtol)
        except (InadmissibleStateError, TimestepTooLargeError) as exc:
            rejected += 1
            dt = 0.25 * h
            if log is not None:
                log.add(t=t, dt=h, accepted=False, reason=str(exc))
            if dt < dt_min:
                raise RuntimeError(f"step size fell below {dt_min:g} at t = {t:.6e}") from exc
            continue
        fac = min(5.0, max(0.2, 0.9 * (err if err > 0 else 1e-10) ** (-1.0 / 3.0)))
        if err <= 1.0:
            u = u_new
            t = t + h
            steps += 1
            flux_total += flux
            if log is not None:
                log.add(step=steps, t=t, dt=h, error=err, accepted=True)
            if callback is not None:
                callback(steps, t, u)
        else:
            rejected += 1
            if log is not None:
                log.add(t=t, dt=h, error=err, accepted=False)
        dt = h * fac
        if dt < dt_min:
            raise RuntimeError(f"step size fell below {dt_min:g} at t = {t:.6e}")
    return IntegrationResult(u, t, steps, rejected, flux_total, log)


# ---------------------------------------------------------------------------
# output


def write_snapshot(path: str | Path, grid: Grid, u: np.ndarray, gamma: float = GAMMA) -> Path:
    """CSV with coordinates, primitive variables and the mathematical entropy."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    X = grid.coordinates()
    rho, vel, p = euler.conservative_to_primitive(u, gamma)
    eta = euler.entropy(u, gamma)
    coords = ["x", "y", "z"][: grid.dim]
    vels = [f"v{k + 1}" for k in range(grid.dim)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(coords + ["rho"] + vels + ["p", "entropy"])
        for i in range(grid.n):
            w.writerow([repr(float(c)) for c in X[i]] + [repr(float(rho[i]))] + [repr(float(c)) for c in vel[i]] + [repr(float(p[i])), repr(float(eta[i]))])
    return path
