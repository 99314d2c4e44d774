"""Benchmark problems and an exact Riemann solver for 1D shock tubes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from .euler import GAMMA, primitive_to_conservative


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    domain: tuple[tuple[float, float], ...]
    t_final: float
    initial: Callable[[np.ndarray], np.ndarray]  # coordinates (n, d) -> states (n, d + 2)
    boundary: str
    n: int  # default nodes per dimension
    dt: Optional[float] = None  # fixed step at the default resolution
    method: str = "rk4"
    tolerances: Optional[tuple[float, float]] = None  # adaptive (atol, rtol)
    scheme: str = "ecav"
    low_flux: str = "hllc"
    positivity: bool = False
    alpha: float = 0.5
    exact: Optional[Callable[[np.ndarray, float], np.ndarray]] = field(default=None, repr=False)
    riemann: Optional[tuple] = None  # (left prim, right prim, interface) for shock tubes

    @property
    def dim(self) -> int:
        return len(self.domain)

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    def step_size(self, n: int) -> Optional[float]:
        """Fixed step scaled with the grid spacing relative to the default resolution."""
        if self.dt is None:
            return None
        if self.name == "density_wave":
            return self.dt
        return self.dt * self.n / n


def _states(rho, vel, p):
    return primitive_to_conservative(rho, vel, p, GAMMA)


def _density_wave_exact(x: np.ndarray, t: float) -> np.ndarray:
    xx = x[:, 0]
    rho = 1.0 + 0.5 * np.sin(np.pi * (xx - 1.7 * t))
    return _states(rho, np.full_like(xx, 1.7), np.ones_like(xx))


def _piecewise(left, right, x0):
    def init(x: np.ndarray) -> np.ndarray:
        xx = x[:, 0]
        lo = xx < x0
        prim = [np.where(lo, left[k], right[k]) for k in range(3)]
        return _states(*prim)

    return init


def _shu_osher(x: np.ndarray) -> np.ndarray:
    xx = x[:, 0]
    lo = xx < -4.0
    rho = np.where(lo, 3.857143, 1.0 + 0.2 * np.sin(5.0 * xx))
    v = np.where(lo, 2.629369, 0.0)
    p = np.where(lo, 10.3333, 1.0)
    return _states(rho, v, p)


def _woodward_colella(x: np.ndarray) -> np.ndarray:
    xx = x[:, 0]
    p = np.where(xx < 0.1, 1e3, np.where(xx < 0.9, 1e-2, 1e2))
    return _states(np.ones_like(xx), np.zeros_like(xx), p)


def _khi(x: np.ndarray) -> np.ndarray:
    X, Y = x[:, 0], x[:, 1]
    B = np.tanh(15.0 * Y + 7.5) - np.tanh(15.0 * Y - 7.5)
    rho = 0.5 + 0.75 * B
    vel = np.stack([0.5 * (B - 1.0), 0.1 * np.sin(2.0 * np.pi * X)], axis=-1)
    return _states(rho, vel, np.ones_like(X))


SOD = ((1.0, 0.0, 1.0), (0.125, 0.0, 0.1), 0.5)
LEBLANC = ((2.0, 0.0, 1e9), (1e-3, 0.0, 1.0), 0.0)

PRESETS: dict[str, ProblemSpec] = {
    "density_wave": ProblemSpec(
        "density_wave", ((-1.0, 1.0),), 1.0, lambda x: _density_wave_exact(x, 0.0), "periodic",
        n=64, dt=1e-4, method="rk4", scheme="ecav", low_flux="lxf", exact=_density_wave_exact,
    ),
    "shu_osher": ProblemSpec(
        "shu_osher", ((-5.0, 5.0),), 1.8, _shu_osher, "dirichlet",
        n=200, dt=2e-3, method="rk4", scheme="ecav", low_flux="lxf",
    ),
    "sod": ProblemSpec(
        "sod", ((0.0, 1.0),), 0.2, _piecewise(*SOD), "dirichlet",
        n=200, dt=5e-4, method="rk4", scheme="ecav", low_flux="lxf", riemann=SOD,
    ),
    "leblanc": ProblemSpec(
        "leblanc", ((-10.0, 10.0),), 1e-4, _piecewise(*LEBLANC), "dirichlet",
        n=4000, dt=6e-8, method="ssprk43", scheme="kl", low_flux="hllc", positivity=True, alpha=0.5,
        riemann=LEBLANC,
    ),
    "woodward_colella": ProblemSpec(
        "woodward_colella", ((0.0, 1.0),), 0.038, _woodward_colella, "reflective",
        n=1200, dt=2e-5, method="ssprk43", scheme="kl", low_flux="hllc", positivity=True, alpha=0.1,
    ),
    "khi2d": ProblemSpec(
        "khi2d", ((-1.0, 1.0), (-1.0, 1.0)), 5.0, _khi, "periodic",
        n=64, method="adaptive", tolerances=(1e-6, 1e-4), scheme="ecav", low_flux="hllc",
    ),
}


def preset_initial_conditions(name: str) -> ProblemSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# exact Riemann solver


class ExactRiemann:
    """Exact solution of the 1D Riemann problem for a polytropic gas.

    ``left``/``right`` are primitive ``(rho, v, p)`` triples.  Vacuum
    generation is not supported.
    """

    def __init__(self, left, right, gamma: float = GAMMA):
        self.g = gamma
        self.rl, self.ul, self.pl = map(float, left)
        self.rr, self.ur, self.pr = map(float, right)
        self.cl = np.sqrt(gamma * self.pl / self.rl)
        self.cr = np.sqrt(gamma * self.pr / self.rr)
        if 2.0 / (gamma - 1.0) * (self.cl + self.cr) <= self.ur - self.ul:
            raise ValueError("initial data generate vacuum")
        self.p_star = self._solve_pressure()
        fl = self._f(self.p_star, self.rl, self.pl, self.cl)
        fr = self._f(self.p_star, self.rr, self.pr, self.cr)
        self.u_star = 0.5 * (self.ul + self.ur) + 0.5 * (fr - fl)

    def _f(self, p, rk, pk, ck):
        g = self.g
        if p > pk:
            A = 2.0 / ((g + 1.0) * rk)
            B = (g - 1.0) / (g + 1.0) * pk
            return (p - pk) * np.sqrt(A / (p + B))
        return 2.0 * ck / (g - 1.0) * ((p / pk) ** ((g - 1.0) / (2.0 * g)) - 1.0)

    def _solve_pressure(self) -> float:
        def res(p):
            return self._f(p, self.rl, self.pl, self.cl) + self._f(p, self.rr, self.pr, self.cr) + self.ur - self.ul

        hi = max(self.pl, self.pr)
        while res(hi) < 0:
            hi *= 2.0
        # bracket in log pressure: the root can sit many decades below the data
        lp = brentq(lambda q: res(np.exp(q)), np.log(1e-300), np.log(hi), xtol=1e-14, maxiter=500)
        return float(np.exp(lp))

    def sample(self, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Primitive ``(rho, v, p)`` at similarity coordinates ``xi = x / t``."""
        xi = np.asarray(xi, dtype=float)
        rho = np.empty_like(xi)
        u = np.empty_like(xi)
        p = np.empty_like(xi)
        for idx, s in np.ndenumerate(xi):
            rho[idx], u[idx], p[idx] = self._sample_one(float(s))
        return rho, u, p

    def _side(self, s, rk, uk, pk, ck, sign):
        """Sample the wave on one side; ``sign = -1`` for left, ``+1`` for right."""
        g = self.g
        ps, us = self.p_star, self.u_star
        if ps > pk:  # shock
            q = np.sqrt((g + 1.0) / (2.0 * g) * ps / pk + (g - 1.0) / (2.0 * g))
            S = uk + sign * ck * q
            if sign * (s - S) >= 0:
                return rk, uk, pk
            r = rk * (ps / pk + (g - 1.0) / (g + 1.0)) / ((g - 1.0) / (g + 1.0) * ps / pk + 1.0)
            return r, us, ps
        r_star = rk * (ps / pk) ** (1.0 / g)
        c_star = ck * (ps / pk) ** ((g - 1.0) / (2.0 * g))
        head = uk + sign * ck
        tail = us + sign * c_star
        if sign * (s - head) >= 0:
            return rk, uk, pk
        if sign * (s - tail) <= 0:
            return r_star, us, ps
        fac = 2.0 / (g + 1.0) - sign * (g - 1.0) / ((g + 1.0) * ck) * (uk - s)
        r = rk * fac ** (2.0 / (g - 1.0))
        v = 2.0 / (g + 1.0) * (-sign * ck + (g - 1.0) / 2.0 * uk + s)
        return r, v, pk * fac ** (2.0 * g / (g - 1.0))

    def _sample_one(self, s: float):
        if s <= self.u_star:
            return self._side(s, self.rl, self.ul, self.pl, self.cl, -1.0)
        return self._side(s, self.rr, self.ur, self.pr, self.cr, 1.0)

    def shock_speed_right(self) -> Optional[float]:
        if self.p_star <= self.pr:
            return None
        g = self.g
        return self.ur + self.cr * np.sqrt((g + 1.0) / (2.0 * g) * self.p_star / self.pr + (g - 1.0) / (2.0 * g))

    def solution(self, x: np.ndarray, t: float, x0: float = 0.0) -> np.ndarray:
        if t <= 0:
            raise ValueError("exact Riemann solution needs t > 0")
        rho, u, p = self.sample((np.asarray(x, dtype=float) - x0) / t)
        return primitive_to_conservative(rho, u, p, self.g)
