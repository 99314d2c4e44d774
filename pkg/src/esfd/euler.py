"""Compressible Euler physics on conservative states ``(rho, rho*v, E)``.

All functions are vectorized: a state array has shape ``(..., d + 2)`` and a
direction array has shape ``(..., d)``.  Nothing here repairs a bad state;
inadmissible input raises :class:`InadmissibleStateError`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

GAMMA = 1.4


class InadmissibleStateError(ValueError):
    """A state with non-positive density or pressure reached the physics."""


@dataclass(frozen=True)
class EntropyQuantities:
    entropy: np.ndarray
    variables: np.ndarray
    potentials: np.ndarray
    fluxes: np.ndarray


def _real(x) -> np.ndarray:
    """Keep any floating dtype (extended precision included); cast everything else to float64."""
    a = np.asarray(x)
    return a if a.dtype.kind == "f" else a.astype(float)


def ndim_of(u: np.ndarray) -> int:
    return u.shape[-1] - 2


def primitive_to_conservative(rho, vel, p, gamma: float = GAMMA) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    vel = np.asarray(vel, dtype=float)
    p = np.asarray(p, dtype=float)
    if vel.ndim == rho.ndim:
        vel = vel[..., None]
    mom = rho[..., None] * vel
    E = p / (gamma - 1.0) + 0.5 * rho * np.sum(vel * vel, axis=-1)
    return np.concatenate([rho[..., None], mom, E[..., None]], axis=-1)


def conservative_to_primitive(u: np.ndarray, gamma: float = GAMMA):
    """Return ``(rho, vel, p)`` with ``vel`` of shape ``(..., d)``."""
    u = _real(u)
    rho = u[..., 0]
    vel = u[..., 1:-1] / rho[..., None]
    p = (gamma - 1.0) * (u[..., -1] - 0.5 * np.sum(u[..., 1:-1] * vel, axis=-1))
    return rho, vel, p


def pressure(u: np.ndarray, gamma: float = GAMMA) -> np.ndarray:
    u = _real(u)
    return (gamma - 1.0) * (u[..., -1] - 0.5 * np.sum(u[..., 1:-1] ** 2, axis=-1) / u[..., 0])


def is_admissible(u: np.ndarray, gamma: float = GAMMA) -> np.ndarray | bool:
    u = _real(u)
    rho = u[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = (rho > 0) & (pressure(u, gamma) > 0)
    ok = ok & np.all(np.isfinite(u), axis=-1)
    return bool(ok) if ok.ndim == 0 else ok


def check_admissible(u: np.ndarray, gamma: float = GAMMA) -> None:
    ok = is_admissible(u, gamma)
    if not np.all(ok):
        bad = np.argwhere(~np.atleast_1d(ok))
        raise InadmissibleStateError(
            f"{len(bad)} inadmissible state(s), first at index {tuple(bad[0])}"
        )


def sound_speed(u: np.ndarray, gamma: float = GAMMA) -> np.ndarray:
    return np.sqrt(gamma * pressure(u, gamma) / u[..., 0])


def physical_flux(u: np.ndarray, k: int, gamma: float = GAMMA) -> np.ndarray:
    """Flux ``f_k(u)`` along coordinate direction ``k`` (0-based)."""
    u = np.asarray(u, dtype=float)
    check_admissible(u, gamma)
    d = ndim_of(u)
    e = np.zeros(d)
    e[k] = 1.0
    return normal_flux(u, np.broadcast_to(e, u.shape[:-1] + (d,)), gamma)


def normal_flux(u: np.ndarray, normal: np.ndarray, gamma: float = GAMMA) -> np.ndarray:
    """``f(u) . n`` for arbitrary (not necessarily unit) ``n``; no admissibility check."""
    rho = u[..., 0]
    mom = u[..., 1:-1]
    E = u[..., -1]
    vel = mom / rho[..., None]
    p = (gamma - 1.0) * (E - 0.5 * np.sum(mom * vel, axis=-1))
    vn = np.sum(vel * normal, axis=-1)
    out = np.empty(np.broadcast_shapes(u.shape, normal.shape[:-1] + (u.shape[-1],)), dtype=np.result_type(u, normal))
    out[..., 0] = rho * vn
    out[..., 1:-1] = mom * vn[..., None] + p[..., None] * normal
    out[..., -1] = (E + p) * vn
    return out


def entropy(u: np.ndarray, gamma: float = GAMMA) -> np.ndarray:
    rho = u[..., 0]
    s = np.log(pressure(u, gamma)) - gamma * np.log(rho)
    return -rho * s / (gamma - 1.0)


def entropy_variables(u: np.ndarray, gamma: float = GAMMA) -> np.ndarray:
    rho, vel, p = conservative_to_primitive(u, gamma)
    s = np.log(p) - gamma * np.log(rho)
    beta = rho / p
    v = np.empty_like(_real(u))
    v[..., 0] = (gamma - s) / (gamma - 1.0) - 0.5 * beta * np.sum(vel * vel, axis=-1)
    v[..., 1:-1] = beta[..., None] * vel
    v[..., -1] = -beta
    return v


def entropy_potential(u: np.ndarray) -> np.ndarray:
    """``psi_k = rho v_k`` for the physical entropy pair, shape ``(..., d)``."""
    return _real(u)[..., 1:-1].copy()


def entropy_quantities(u: np.ndarray, gamma: float = GAMMA) -> EntropyQuantities:
    u = np.asarray(u, dtype=float)
    check_admissible(u, gamma)
    rho, vel, p = conservative_to_primitive(u, gamma)
    s = np.log(p) - gamma * np.log(rho)
    eta = -rho * s / (gamma - 1.0)
    F = -(rho * s / (gamma - 1.0))[..., None] * vel
    return EntropyQuantities(eta, entropy_variables(u, gamma), entropy_potential(u), F)


def _check_pair(u_i, u_j, normal, gamma):
    u_i = np.asarray(u_i, dtype=float)
    u_j = np.asarray(u_j, dtype=float)
    normal = np.asarray(normal, dtype=float)
    check_admissible(u_i, gamma)
    check_admissible(u_j, gamma)
    return u_i, u_j, normal


def max_wavespeed(u_i, u_j, normal, gamma: float = GAMMA, check: bool = True) -> np.ndarray:
    """Davis estimate ``max(|v_i.n| + c_i, |v_j.n| + c_j)``."""
    if check:
        u_i, u_j, normal = _check_pair(u_i, u_j, normal, gamma)
    vn_i = np.sum(u_i[..., 1:-1] * normal, axis=-1) / u_i[..., 0]
    vn_j = np.sum(u_j[..., 1:-1] * normal, axis=-1) / u_j[..., 0]
    return np.maximum(np.abs(vn_i) + sound_speed(u_i, gamma), np.abs(vn_j) + sound_speed(u_j, gamma))


def flux_central(u_i, u_j, normal, gamma: float = GAMMA, check: bool = True) -> np.ndarray:
    if check:
        u_i, u_j, normal = _check_pair(u_i, u_j, normal, gamma)
    return 0.5 * (normal_flux(u_i, normal, gamma) + normal_flux(u_j, normal, gamma))


def flux_lxf(u_i, u_j, normal, gamma: float = GAMMA, check: bool = True) -> np.ndarray:
    if check:
        u_i, u_j, normal = _check_pair(u_i, u_j, normal, gamma)
    lam = max_wavespeed(u_i, u_j, normal, gamma, check=False)
    return flux_central(u_i, u_j, normal, gamma, check=False) + 0.5 * lam[..., None] * (u_i - u_j)


def flux_hllc(u_i, u_j, normal, gamma: float = GAMMA, check: bool = True) -> np.ndarray:
    """HLLC flux with Davis outer waves and Toro's contact estimate.

    Multi-dimensional states are handled in the normal frame: the contact
    state keeps the tangential velocity and replaces the normal one by the
    contact speed.
    """
    if check:
        u_i, u_j, normal = _check_pair(u_i, u_j, normal, gamma)
    u_i, u_j = np.broadcast_arrays(u_i, u_j)
    shape = np.broadcast_shapes(u_i.shape, normal.shape[:-1] + (u_i.shape[-1],))
    u_i = np.broadcast_to(u_i, shape)
    u_j = np.broadcast_to(u_j, shape)
    normal = np.broadcast_to(normal, shape[:-1] + (shape[-1] - 2,))

    rL, rR = u_i[..., 0], u_j[..., 0]
    velL = u_i[..., 1:-1] / rL[..., None]
    velR = u_j[..., 1:-1] / rR[..., None]
    pL, pR = pressure(u_i, gamma), pressure(u_j, gamma)
    cL, cR = np.sqrt(gamma * pL / rL), np.sqrt(gamma * pR / rR)
    vnL = np.sum(velL * normal, axis=-1)
    vnR = np.sum(velR * normal, axis=-1)

    SL = np.minimum(vnL - cL, vnR - cR)
    SR = np.maximum(vnL + cL, vnR + cR)
    mL = rL * (SL - vnL)
    mR = rR * (SR - vnR)
    denom = mL - mR
    with np.errstate(divide="ignore", invalid="ignore"):
        Ss = (pR - pL + mL * vnL - mR * vnR) / denom
    degenerate = ~np.isfinite(Ss) | (Ss < SL) | (Ss > SR)

    fL = normal_flux(u_i, normal, gamma)
    fR = normal_flux(u_j, normal, gamma)

    def star(u, r, vel, vn, p, S):
        with np.errstate(divide="ignore", invalid="ignore"):
            fac = r * (S - vn) / (S - Ss)
        us = np.empty_like(u)
        us[..., 0] = fac
        us[..., 1:-1] = fac[..., None] * (vel + (Ss - vn)[..., None] * normal)
        with np.errstate(divide="ignore", invalid="ignore"):
            us[..., -1] = fac * (u[..., -1] / r + (Ss - vn) * (Ss + p / (r * (S - vn))))
        return us

    fsL = fL + SL[..., None] * (star(u_i, rL, velL, vnL, pL, SL) - u_i)
    fsR = fR + SR[..., None] * (star(u_j, rR, velR, vnR, pR, SR) - u_j)

    out = np.where((SL >= 0)[..., None], fL, np.where((Ss >= 0)[..., None], fsL, np.where((SR > 0)[..., None], fsR, fR)))
    if np.any(degenerate):
        logger.debug("HLLC: %d degenerate wave configurations, using LxF", int(np.sum(degenerate)))
        out = np.where(degenerate[..., None], flux_lxf(u_i, u_j, normal, gamma, check=False), out)
    return out


NUMERICAL_FLUXES = {
    "central": flux_central,
    "lxf": flux_lxf,
    "hllc": flux_hllc,
}


def get_flux(name: str):
    try:
        return NUMERICAL_FLUXES[name]
    except KeyError:
        raise ValueError(f"unknown flux {name!r}; choose from {sorted(NUMERICAL_FLUXES)}") from None


def mirror_state(u: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Reflect the momentum component along the unit ``normal``."""
    out = np.array(u, dtype=float, copy=True)
    mn = np.sum(out[..., 1:-1] * normal, axis=-1)
    out[..., 1:-1] -= 2.0 * mn[..., None] * normal
    return out
