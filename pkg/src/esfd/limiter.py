"""Nodal entropy-inequality assembly and quadratic knapsack solves.

At every node ``i`` the scheme needs pair coefficients ``theta_ij >= 0`` with
``a_i . theta_i >= b_i`` and minimal ``|theta_i|``.  Everything here is batched
over nodes: a batch holds ``a`` of shape ``(n, K)`` laid out on the
node-centric slots of a :class:`~esfd.sbp.NormalTable`, padded with zeros.

Pair quantities are oriented along the stored edge direction ``tail -> head``.
The per-pair flux increment ``delta_ij`` is what one unit of coefficient adds
to the high order flux: ``u_i - u_j`` for artificial viscosity, ``f^L_ij -
f^H_ij`` for knapsack blending.  Both are antisymmetric in ``(i, j)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .euler import GAMMA, entropy_variables, is_admissible, normal_flux, pressure
from .sbp import NormalTable

logger = logging.getLogger(__name__)

MODES = ("ecav", "kl", "recav", "rkl")


class InfeasibleKnapsackError(ValueError):
    pass


class TimestepTooLargeError(ValueError):
    def __init__(self, message: str, dt_bound: float):
        super().__init__(f"{message} (admissible dt bound ~ {dt_bound:.3e})")
        self.dt_bound = dt_bound


@dataclass
class KnapsackProblem:
    """``min |theta|^2`` s.t. ``a . theta >= b``, ``0 <= theta <= upper``."""

    a: np.ndarray
    b: float
    upper: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a, dtype=float)
        self.b = float(self.b)
        if self.upper is not None:
            self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), self.a.shape).copy()


@dataclass
class KnapsackBatch:
    """One knapsack problem per node; padded columns have ``a = 0``."""

    a: np.ndarray  # (n, K) or (n, K + 1) in relaxed mode
    b: np.ndarray  # (n,)
    upper: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None  # valid columns

    def problem(self, i: int) -> KnapsackProblem:
        cols = slice(None) if self.mask is None else self.mask[i]
        up = None if self.upper is None else self.upper[i][cols]
        return KnapsackProblem(self.a[i][cols], self.b[i], up)


@dataclass
class CoefficientField:
    theta: np.ndarray  # per edge
    mode: str
    tau: Optional[np.ndarray] = None  # per node, relaxed modes only
    symmetric: bool = True


@dataclass
class LimitingCoefficients:
    ell: np.ndarray  # per edge (or per node when no table was given)
    alpha: float
    nodal: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# solvers


def solve_knapsack_batch(
    a: np.ndarray, b: np.ndarray, upper: Optional[np.ndarray] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Exact minimizers of ``|theta|^2`` s.t. ``a.theta >= b``, ``0 <= theta <= upper``.

    The optimum is ``theta(mu) = clip(mu * a, 0, upper)`` with the multiplier
    ``mu >= 0`` solving the piecewise linear equation ``a.theta(mu) = b``;
    non-positive entries of ``a`` therefore get ``theta = 0``.  Rows with
    ``b <= 0`` return zero.  Returns ``(theta, feasible)``; infeasible rows
    are filled with ``upper`` on the positive entries of ``a``.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    ap = np.maximum(a, 0.0)
    theta = np.zeros_like(a)
    feasible = np.ones(len(b), dtype=bool)
    active = b > 0
    if not np.any(active):
        return theta, feasible

    ap_act = ap[active]
    b_act = b[active]
    a2 = ap_act * ap_act
    if upper is None:
        tot = a2.sum(axis=1)
        ok = tot > 0
        mu = np.where(ok, b_act / np.where(ok, tot, 1.0), 0.0)
        theta[active] = mu[:, None] * ap_act
        feasible[active] = ok
        return theta, feasible

    up = np.broadcast_to(np.asarray(upper, dtype=float), a.shape)[active]
    up = np.maximum(up, 0.0)
    finite = np.isfinite(up)
    pos = ap_act > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        brk = np.where(pos & finite, up / np.where(pos, ap_act, 1.0), np.inf)
    brk = np.where(pos, brk, 0.0)  # zero-a columns never contribute
    order = np.argsort(brk, axis=1, kind="stable")
    brk_s = np.take_along_axis(brk, order, axis=1)
    au_s = np.take_along_axis(np.where(pos & finite, ap_act * np.where(finite, up, 0.0), 0.0), order, axis=1)
    a2_s = np.take_along_axis(a2, order, axis=1)
    cum_au = np.cumsum(au_s, axis=1)
    cum_a2 = np.cumsum(a2_s, axis=1)
    tot_a2 = cum_a2[:, -1:]
    # value of a.theta at each breakpoint
    with np.errstate(invalid="ignore"):
        g = cum_au + brk_s * (tot_a2 - cum_a2)
    g = np.where(np.isinf(brk_s), np.where(tot_a2 - cum_a2 + a2_s > 0, np.inf, cum_au), g)
    reach = g >= b_act[:, None]
    has = reach.any(axis=1)
    k = np.argmax(reach, axis=1)
    rows = np.arange(len(b_act))
    prev_au = np.where(k > 0, cum_au[rows, k - 1], 0.0)
    prev_a2 = np.where(k > 0, cum_a2[rows, k - 1], 0.0)
    rem = tot_a2[:, 0] - prev_a2
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = np.where(has & (rem > 0), (b_act - prev_au) / rem, 0.0)
    th = np.clip(mu[:, None] * ap_act, 0.0, up)
    th = np.where(has[:, None], th, np.where(pos, up, 0.0))
    theta[active] = th
    feasible[active] = has
    return theta, feasible


def solve_unbounded(p: KnapsackProblem) -> np.ndarray:
    """Closed form ``b a / (a.a)`` for ``a >= 0``; zero when ``b <= 0``."""
    if p.upper is not None:
        raise ValueError("solve_unbounded takes problems without upper bounds")
    if p.b <= 0:
        return np.zeros_like(p.a)
    if np.any(p.a < 0):
        raise ValueError("solve_unbounded requires a >= 0; use solve_relaxed for signed a")
    aa = float(p.a @ p.a)
    if aa <= 0:
        raise InfeasibleKnapsackError(f"b = {p.b:.3e} > 0 but a = 0")
    return p.b * p.a / aa


def solve_bounded(p: KnapsackProblem) -> np.ndarray:
    if p.upper is None:
        raise ValueError("solve_bounded needs upper bounds")
    theta, ok = solve_knapsack_batch(p.a[None, :], np.array([p.b]), p.upper[None, :])
    if not ok[0]:
        budget = float(np.maximum(p.a, 0) @ p.upper) if np.all(np.isfinite(p.upper)) else np.inf
        raise InfeasibleKnapsackError(f"b = {p.b:.3e} exceeds the bound budget {budget:.3e}")
    return theta[0]


def solve_relaxed(p: KnapsackProblem) -> np.ndarray:
    """Relaxed problem with signed ``a``: clip ``a`` to its positive part."""
    if p.b <= 0:
        return np.zeros_like(p.a)
    if p.upper is None:
        ac = np.maximum(p.a, 0.0)
        denom = float(p.a @ ac)
        if denom <= 0:
            raise InfeasibleKnapsackError("relaxed problem has no positive entry in a")
        return p.b * ac / denom
    return solve_bounded(p)


# ---------------------------------------------------------------------------
# assembly


def _slots(table: NormalTable, edge_values: np.ndarray, fill: float = 0.0) -> np.ndarray:
    mask = table.slot_mask
    e = np.where(mask, table.slot_edge, 0)
    out = edge_values[e]
    out[~mask] = fill
    return out


WORK_PRECISION = np.longdouble


def precise_entropy_variables(u: np.ndarray, gamma: float = GAMMA) -> np.ndarray:
    return entropy_variables(np.asarray(u).astype(WORK_PRECISION), WORK_PRECISION(gamma))


def entropy_violation(
    table: NormalTable, u: np.ndarray, gamma: float = GAMMA, v: Optional[np.ndarray] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-edge terms ``|n|[(v_j - v_i).f^H - (psi_j - psi_i).n_hat]`` and their nodal sums ``b``.

    The edge term is the same seen from either end, so ``b`` is an unsigned
    nodal sum.  On smooth data ``b`` is a tiny remainder of much larger
    cancelling terms, and rounding noise in it turns into spurious
    dissipation through ``max(b, 0)``; the evaluation therefore runs in
    extended precision (where the platform provides it).  ``v`` may pass
    precomputed :func:`precise_entropy_variables`.
    """
    ue = np.asarray(u).astype(WORK_PRECISION)
    g = WORK_PRECISION(gamma)
    I, J = table.tail, table.head
    nrm = table.norms.astype(WORK_PRECISION)
    nhat = table.normals.astype(WORK_PRECISION) / nrm[:, None]
    v = entropy_variables(ue, g) if v is None else v
    f = 0.5 * (normal_flux(ue[I], nhat, g) + normal_flux(ue[J], nhat, g))
    dpsi = np.sum((ue[J, 1:-1] - ue[I, 1:-1]) * nhat, axis=1)
    w = nrm * (np.sum((v[J] - v[I]) * f, axis=1) - dpsi)
    return w.astype(float), table.node_sum(w).astype(float)


def pair_dissipation(table: NormalTable, v: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Symmetric ``a_ij = |n_ij| (v_i - v_j).delta_ij`` per edge.

    Pass ``v`` at the precision used for ``b`` so that nearly equal
    neighbours do not get ``a = 0`` next to a roundoff-sized ``b > 0``.
    """
    dv = v[table.tail] - v[table.head]
    return (table.norms * np.sum(dv * delta, axis=1)).astype(float)


def assemble_ecav(
    table: NormalTable, u: np.ndarray, v: np.ndarray, b: np.ndarray
) -> tuple[KnapsackBatch, np.ndarray]:
    """Artificial-viscosity knapsack data; returns the batch and per-edge ``a``.

    ``b`` is the nodal entropy violation from :func:`entropy_violation`.
    """
    a_e = pair_dissipation(table, v, u[table.tail] - u[table.head])
    a_e = np.where(a_e < 0, np.where(a_e > -1e-13 * (1.0 + np.abs(a_e)), 0.0, a_e), a_e)
    if np.any(a_e < 0):
        raise ValueError("negative entropy dissipation in artificial-viscosity assembly")
    return KnapsackBatch(_slots(table, a_e), np.asarray(b, dtype=float), None, table.slot_mask), a_e


def assemble_kl(
    table: NormalTable,
    v: np.ndarray,
    f_high: np.ndarray,
    f_low: np.ndarray,
    b: np.ndarray,
    ell: Optional[np.ndarray] = None,
) -> tuple[KnapsackBatch, np.ndarray]:
    """Knapsack-limiting data with box ``[0, 1 - ell]``.

    ``a`` keeps its sign: when the low flux is not a pure graph viscosity
    (HLLC) a pair may have ``a_ij < 0``; the solver then leaves it at zero and
    ``b`` still accounts for any ``ell`` forced on it.
    """
    a_e = pair_dissipation(table, v, f_low - f_high)
    ell_e = np.zeros(table.n_edges) if ell is None else np.asarray(ell, dtype=float)
    ae_ell = a_e * ell_e
    b = np.asarray(b, dtype=float) - table.node_sum(ae_ell)
    upper = _slots(table, 1.0 - ell_e)
    return KnapsackBatch(_slots(table, a_e), b, upper, table.slot_mask), a_e


def assemble_relaxed(
    table: NormalTable,
    v: np.ndarray,
    delta: np.ndarray,
    b: np.ndarray,
    mode: str,
    ell: Optional[np.ndarray] = None,
) -> KnapsackBatch:
    """Relaxed-inequality data: ``K`` pair columns plus one trailing ``tau`` column.

    Pair column ``j`` of node ``i`` is ``|n_ij| v_i.delta_ij``; the ``tau``
    column is ``-sum_j |n_ij| v_j.delta_ij``.  ``tau`` only enters the
    entropy flux bookkeeping, never the update itself.
    """
    if mode not in ("recav", "rkl"):
        raise ValueError(f"relaxed assembly needs mode recav or rkl, got {mode!r}")
    n, K = table.slot_edge.shape
    mask = table.slot_mask
    e = np.where(mask, table.slot_edge, 0)
    sgn = table.slot_sign[..., None]
    nrm = _slots(table, table.norms)
    d_slot = delta[e] * sgn  # delta_ij oriented away from node i
    nb = np.where(mask, table.slot_neighbor, 0)
    a_theta = nrm * np.einsum("kv,kjv->kj", v, d_slot)
    tau_terms = nrm * np.sum(v[nb] * d_slot, axis=-1)
    a_theta[~mask] = 0.0
    tau_terms[~mask] = 0.0
    a = np.concatenate([a_theta, -tau_terms.sum(axis=1, keepdims=True)], axis=1)

    b = np.asarray(b, dtype=float)
    upper = None
    full_mask = np.concatenate([mask, np.ones((n, 1), dtype=bool)], axis=1)
    if mode == "rkl":
        ell_e = np.zeros(table.n_edges) if ell is None else np.asarray(ell, dtype=float)
        ell_s = _slots(table, ell_e)
        b = b - np.sum(a_theta * ell_s, axis=1)
        upper = np.concatenate([1.0 - ell_s, np.ones((n, 1))], axis=1)
    return KnapsackBatch(a, b, upper, full_mask)


def symmetrize(table: NormalTable, theta_hat: np.ndarray) -> np.ndarray:
    """``theta_ij = max(theta_hat_ij, theta_hat_ji)`` from slot values to edges."""
    K = table.slot_edge.shape[1]
    flat = theta_hat[:, :K].ravel()
    return np.maximum(flat[table.tail_slots], flat[table.head_slots])


def nodal_dot(table: NormalTable, a_e: np.ndarray, theta_e: np.ndarray) -> np.ndarray:
    """``sum_j a_ij theta_ij`` per node for symmetric edge quantities."""
    return table.node_sum(a_e * theta_e)


# ---------------------------------------------------------------------------
# positivity


def _max_blend(
    u_low: np.ndarray,
    step: np.ndarray,
    alpha: float,
    gamma: float,
    iterations: int = 45,
) -> np.ndarray:
    """Largest ``s`` in ``[0, 1]`` with ``w = u_low + s*step`` satisfying
    ``rho(w) >= alpha rho_low`` and ``p(w) >= alpha p_low``.

    ``u_low`` has shape ``(m, V)``, ``step`` has shape ``(m, K, V)``.  The
    admissible ``s`` form an interval starting at 0 because density is linear
    and pressure concave along the segment.
    """
    rho0 = u_low[:, 0][:, None]
    p0 = pressure(u_low, gamma)[:, None]
    drho = step[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        s_rho = np.where(drho < 0, (alpha - 1.0) * rho0 / drho, 1.0)
    s_rho = np.clip(np.nan_to_num(s_rho, nan=1.0, posinf=1.0), 0.0, 1.0)

    def ok(s):
        w = u_low[:, None, :] + s[..., None] * step
        with np.errstate(divide="ignore", invalid="ignore"):
            return (w[..., 0] >= alpha * rho0) & (w[..., 0] > 0) & (pressure(w, gamma) >= alpha * p0)

    good = ok(s_rho)
    lo = np.where(good, s_rho, 0.0)
    hi = s_rho.copy()
    todo = ~good
    if np.any(todo):
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            m_ok = ok(mid)
            lo = np.where(todo & m_ok, mid, lo)
            hi = np.where(todo & ~m_ok, mid, hi)
    return lo


def nodal_limits(
    u: np.ndarray,
    r_low: np.ndarray,
    slot_deltas: np.ndarray,
    slot_mask: np.ndarray,
    mass: np.ndarray,
    dt: float,
    alpha: float,
    gamma: float = GAMMA,
) -> np.ndarray:
    """Per-node lower bounds on the blending coefficient.

    The forward Euler update of node ``i`` with coefficients ``theta_ij`` is
    ``u_low - dt/M sum_j (1 - theta_ij) g_ij`` with ``g_ij`` the slot deltas.
    Writing it as the average over the ``K_i`` slots of
    ``u_low - K_i dt/M (1 - theta_ij) g_ij`` and using concavity of pressure,
    relative positivity holds for every ``theta_ij >= ell_i`` when each slot
    state stays positive at ``1 - theta = 1 - ell_i``.
    """
    u_low = u - (dt / mass)[:, None] * r_low
    if not np.all(is_admissible(u_low, gamma)):
        raise TimestepTooLargeError("low order forward Euler update is inadmissible", np.nan)
    k_i = slot_mask.sum(axis=1).astype(float)
    step = -(k_i * dt / mass)[:, None, None] * slot_deltas
    step = np.where(slot_mask[..., None], step, 0.0)
    s = _max_blend(u_low, step, alpha, gamma)
    s = np.where(slot_mask, s, 1.0)
    return np.clip(1.0 - s.min(axis=1), 0.0, 1.0)


def limiting_coefficients(
    u: np.ndarray,
    r_high: np.ndarray,
    r_low: np.ndarray,
    mass: np.ndarray,
    dt: float,
    alpha: float,
    table: Optional[NormalTable] = None,
    gamma: float = GAMMA,
) -> LimitingCoefficients:
    """Limiting coefficients from nodal residuals.

    Density gets the closed form ``1 - (1 - alpha)/dt (M u - dt r_L)/(r_H - r_L)``
    (zero where ``r_H <= r_L``); pressure is enforced by bisection along the
    same blend.  With a ``table`` the result is symmetrized onto edges.
    """
    u = np.asarray(u, dtype=float)
    mass = np.asarray(mass, dtype=float)
    deltas = (np.asarray(r_high) - np.asarray(r_low))[:, None, :]
    mask = np.ones((len(u), 1), dtype=bool)
    nodal = nodal_limits(u, r_low, deltas, mask, mass, dt, alpha, gamma)
    if table is None:
        return LimitingCoefficients(nodal, alpha, nodal)
    return LimitingCoefficients(np.maximum(nodal[table.tail], nodal[table.head]), alpha, nodal)


def low_order_dt_bound(table: NormalTable, lam_e: np.ndarray, mass: np.ndarray, lam_b=None) -> float:
    """Forward Euler bound ``min_i M_ii / sum_j |n_ij| lambda_ij`` for the graph viscosity scheme."""
    w = table.norms * lam_e
    s = table.node_sum(w)
    if lam_b is not None:
        s = s + lam_b
    with np.errstate(divide="ignore"):
        return float(np.min(np.where(s > 0, mass / s, np.inf)))
