"""Summation-by-parts finite difference operators on uniform tensor grids.

The first-derivative operator is stored as ``D = M^{-1} Q`` with a diagonal
norm ``M``.  Periodic operators are centered stencils (``Q`` skew-symmetric),
bounded ones are diagonal-norm closures with ``Q + Q^T = B``.

Flux differencing works on ``Q`` rather than ``D``: the pair normals are

.. math::

    n_{ij,k} = (Q_k - Q_k^T)_{ij}, \\qquad b_{i,k} = B_{k,ii}.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property, lru_cache
from math import factorial, prod
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import sympy

SUPPORTED_ORDERS = (2, 4, 6)

# diagonal-norm boundary weights (interior order 2p, boundary order p)
_CLOSURE_NORMS = {
    2: [Fraction(1, 2)],
    4: [Fraction(17, 48), Fraction(59, 48), Fraction(43, 48), Fraction(49, 48)],
    6: [
        Fraction(13649, 43200),
        Fraction(12013, 8640),
        Fraction(2711, 4320),
        Fraction(5359, 4320),
        Fraction(7877, 8640),
        Fraction(43801, 43200),
    ],
}

# rounded upper-triangle entries of the standard 6-3 closure; only used to pick a
# member of the exact solution family
_CLOSURE_HINTS = {
    6: {
        (0, 1): Fraction(127, 211), (0, 2): Fraction(35, 298), (0, 3): Fraction(-32, 83),
        (0, 4): Fraction(89, 456), (0, 5): Fraction(-2, 69),
        (1, 2): Fraction(-1, 167), (1, 3): Fraction(391, 334), (1, 4): Fraction(-50, 71),
        (1, 5): Fraction(14, 99),
        (2, 3): Fraction(-34, 79), (2, 4): Fraction(90, 113), (2, 5): Fraction(-69, 271),
        (3, 4): Fraction(6, 25), (3, 5): Fraction(31, 316),
        (4, 5): Fraction(37, 56),
    }
}


class OperatorError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform grid on a 1D interval or a 2D rectangle.

    Nodes are ordered with the last dimension fastest (C order), so in 2D
    node ``(ix, iy)`` has flat index ``ix * ny + iy``.
    """

    nodes_per_dim: tuple[int, ...]
    domain: tuple[tuple[float, float], ...]
    periodic: tuple[bool, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes_per_dim", tuple(int(n) for n in self.nodes_per_dim))
        object.__setattr__(self, "domain", tuple((float(a), float(b)) for a, b in self.domain))
        object.__setattr__(self, "periodic", tuple(bool(p) for p in self.periodic))
        if self.dim not in (1, 2):
            raise ValueError(f"only 1D and 2D grids are supported, got dim={self.dim}")
        if not (len(self.domain) == len(self.periodic) == self.dim):
            raise ValueError("nodes_per_dim, domain and periodic must have equal length")
        for n, (lo, hi), per in zip(self.nodes_per_dim, self.domain, self.periodic):
            if n < 2 or hi <= lo:
                raise ValueError(f"bad grid axis: n={n}, domain=({lo}, {hi})")

    @classmethod
    def uniform(
        cls,
        n: int | Sequence[int],
        domain: Sequence[float] | Sequence[Sequence[float]],
        periodic: bool | Sequence[bool] = True,
    ) -> "Grid":
        if np.isscalar(domain[0]):
            doms = (tuple(domain),)
        else:
            doms = tuple(tuple(d) for d in domain)
        # a scalar node count applies to every axis of the domain
        ns = (int(n),) * len(doms) if np.isscalar(n) else tuple(n)
        if len(doms) == 1 and len(ns) > 1:
            doms = doms * len(ns)
        pers = (periodic,) * len(ns) if isinstance(periodic, bool) else tuple(periodic)
        return cls(ns, doms, pers)

    @property
    def dim(self) -> int:
        return len(self.nodes_per_dim)

    @property
    def n(self) -> int:
        return prod(self.nodes_per_dim)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(
            (hi - lo) / (n if per else n - 1)
            for n, (lo, hi), per in zip(self.nodes_per_dim, self.domain, self.periodic)
        )

    def axis(self, k: int) -> np.ndarray:
        n = self.nodes_per_dim[k]
        lo, _ = self.domain[k]
        return lo + self.spacing[k] * np.arange(n)

    def coordinates(self) -> np.ndarray:
        """Node coordinates, shape ``(n, dim)``."""
        axes = np.meshgrid(*[self.axis(k) for k in range(self.dim)], indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=-1)


@dataclass(frozen=True, eq=False)
class SbpOperator:
    order: int
    grid: Grid
    derivative: tuple[sp.csr_matrix, ...]
    mass: np.ndarray  # diagonal of M
    boundary: tuple[np.ndarray, ...]  # diagonals of B_k
    q: tuple[sp.csr_matrix, ...] = field(repr=False)

    @property
    def stencil_order(self) -> int:
        return self.order + (self.order % 2)


@dataclass(frozen=True, eq=False)
class NormalTable:
    """Pairwise stencil normals.

    Each unordered pair ``{i, j}`` with nonzero normal is stored once in
    ``(tail, head)``, oriented along the positive axis direction (across the
    seam for periodic neighbours), with ``normals[e] = n_ij``; the reverse
    direction is ``n_ji = -n_ij``.  ``slot_edge``/``slot_sign`` give the
    node-centric padded view used by the per-node knapsack solves; every node
    lists its neighbours by axis and then by signed offset, so nodal sums are
    evaluated in the same order at every node and periodic shifts of the data
    commute exactly with the scheme.
    """

    tail: np.ndarray
    head: np.ndarray
    normals: np.ndarray  # (E, d)
    boundary: np.ndarray  # (n, d)
    slot_edge: np.ndarray  # (n, K), -1 where padded
    slot_sign: np.ndarray  # (n, K), +1 if node is the tail
    n_nodes: int

    @property
    def n_edges(self) -> int:
        return len(self.tail)

    @cached_property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.normals, axis=1)

    @cached_property
    def unit_normals(self) -> np.ndarray:
        return self.normals / self.norms[:, None]

    @cached_property
    def slot_mask(self) -> np.ndarray:
        return self.slot_edge >= 0

    @cached_property
    def slot_neighbor(self) -> np.ndarray:
        e = np.where(self.slot_mask, self.slot_edge, 0)
        nb = np.where(self.slot_sign > 0, self.head[e], self.tail[e])
        return np.where(self.slot_mask, nb, -1)

    @cached_property
    def tail_slots(self) -> np.ndarray:
        """Flat slot index (into ``slot_edge.ravel()``) of every edge at its tail."""
        return self._edge_slots(1)

    @cached_property
    def head_slots(self) -> np.ndarray:
        return self._edge_slots(-1)

    def _edge_slots(self, sign: int) -> np.ndarray:
        flat = np.flatnonzero((self.slot_sign.ravel() == sign) & (self.slot_edge.ravel() >= 0))
        out = np.empty(self.n_edges, dtype=np.int64)
        out[self.slot_edge.ravel()[flat]] = flat
        return out

    def slot_normals(self) -> np.ndarray:
        """``n_ij`` for every slot, shape ``(n, K, d)``; zero on padding."""
        e = np.where(self.slot_mask, self.slot_edge, 0)
        out = self.normals[e] * self.slot_sign[..., None]
        out[~self.slot_mask] = 0.0
        return out

    def node_sum(self, edge_values: np.ndarray, signed: bool = False) -> np.ndarray:
        """``sum_j`` of per-edge values at every node, in slot order.

        With ``signed`` the value counts ``+`` at the tail and ``-`` at the head.
        """
        vals = np.asarray(edge_values)
        e = np.where(self.slot_mask, self.slot_edge, 0)
        w = np.where(self.slot_mask, self.slot_sign if signed else 1, 0).astype(vals.dtype)
        g = vals[e]
        if vals.ndim == 1:
            return np.sum(g * w, axis=1)
        return np.sum(g * w[..., None], axis=1)

    def incidence(self) -> sp.csr_matrix:
        """Signed node-edge incidence: +1 at the tail, -1 at the head."""
        E = self.n_edges
        rows = np.concatenate([self.tail, self.head])
        cols = np.concatenate([np.arange(E), np.arange(E)])
        vals = np.concatenate([np.ones(E), -np.ones(E)])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_nodes, E))

    def neighbor_pairs(self, i: int) -> list[tuple[int, np.ndarray]]:
        """``(j, n_ij)`` for every neighbor of node ``i``."""
        out = []
        for e, s in zip(self.slot_edge[i], self.slot_sign[i]):
            if e < 0:
                continue
            j = self.head[e] if s > 0 else self.tail[e]
            out.append((int(j), s * self.normals[e]))
        return out


def _central_fractions(order: int) -> list[Fraction]:
    if order < 2 or order % 2:
        raise OperatorError(f"centered stencils need an even order, got {order}")
    p = order // 2
    return [
        Fraction((-1) ** (k + 1) * factorial(p) ** 2, k * factorial(p - k) * factorial(p + k))
        for k in range(1, p + 1)
    ]


def central_coefficients(order: int) -> np.ndarray:
    """Weights ``c_1..c_p`` of the order-``2p`` centered first derivative."""
    return np.array([float(v) for v in _central_fractions(order)])


def _periodic_q(n: int, order: int) -> sp.csr_matrix:
    c = central_coefficients(order)
    rows, cols, vals = [], [], []
    idx = np.arange(n)
    for k, ck in enumerate(c, start=1):
        for sgn in (1, -1):
            rows.append(idx)
            cols.append((idx + sgn * k) % n)
            vals.append(np.full(n, sgn * ck))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


@lru_cache(maxsize=None)
def _closure_block(order: int) -> np.ndarray:
    """Solve the boundary block of ``Q`` for a diagonal-norm SBP operator.

    ``Q`` is the interior stencil everywhere except the top-left ``r x r``
    block, which is ``S + B/2`` with ``S`` skew.  The skew unknowns are fixed
    by requiring the block rows to differentiate ``x^k`` exactly for
    ``k <= order/2``; the minimum-norm solution is taken when the family has
    free parameters.
    """
    h = _CLOSURE_NORMS[order]
    r = len(h)
    p = order // 2
    c = _central_fractions(order)
    width = r + p
    x = [Fraction(v) for v in range(width)]
    unknowns = [(i, j) for i in range(r) for j in range(i + 1, r)]
    rows, rhs = [], []
    for i in range(r):
        for k in range(p + 1):
            xk = [v**k for v in x]
            # known part: interior stencil entries outside the block, and -1/2 at (0, 0)
            known = Fraction(0)
            for j in range(r, width):
                off = j - i
                if 1 <= off <= p:
                    known += c[off - 1] * xk[j]
            if i == 0:
                known -= Fraction(1, 2) * xk[0]
            target = h[i] * k * x[i] ** (k - 1) if k > 0 else Fraction(0)
            coeffs = [Fraction(0)] * len(unknowns)
            for m, (a, b) in enumerate(unknowns):
                if a == i:
                    coeffs[m] += xk[b]
                elif b == i:
                    coeffs[m] -= xk[a]
            rows.append(coeffs)
            rhs.append(target - known)
    A = sympy.Matrix(rows)
    y = sympy.Matrix(rhs)
    if unknowns:
        try:
            sol, params = A.gauss_jordan_solve(y)
        except ValueError as exc:
            raise OperatorError(f"no consistent SBP closure of order {order}") from exc
        if params.shape[0]:
            # member of the family closest to the published closure (exact arithmetic)
            x0 = sol.subs({t: 0 for t in params})
            null = sol.jacobian(params)
            hint = _CLOSURE_HINTS.get(order, {})
            ref = sympy.Matrix([sympy.Rational(hint.get(key, 0)) for key in unknowns])
            t = (null.T * null).inv() * null.T * (ref - x0)
            sol = x0 + null * t
        sol = [float(v) for v in sol]
    elif any(v != 0 for v in y):
        raise OperatorError(f"no consistent SBP closure of order {order}")
    block = np.zeros((r, r))
    for m, (a, b) in enumerate(unknowns):
        block[a, b] = sol[m]
        block[b, a] = -sol[m]
    block[0, 0] = -0.5
    return block


def _bounded_q_and_norm(n: int, order: int) -> tuple[sp.csr_matrix, np.ndarray]:
    h = np.array([float(w) for w in _CLOSURE_NORMS[order]])
    r = len(h)
    if n < 2 * r + order // 2:
        raise OperatorError(f"grid with {n} nodes is too small for the order-{order} closure")
    p = order // 2
    c = central_coefficients(order)
    Q = sp.lil_matrix((n, n))
    for i in range(n):
        for k in range(1, p + 1):
            if i + k < n:
                Q[i, i + k] = c[k - 1]
            if i - k >= 0:
                Q[i, i - k] = -c[k - 1]
    block = _closure_block(order)
    Q[:r, :r] = block
    # right boundary mirrors the left: Q_{n-1-i, n-1-j} = -Q_{ij}
    Q[n - r :, n - r :] = -block[::-1, ::-1]
    w = np.ones(n)
    w[:r] = h
    w[n - r :] = h[::-1]
    return Q.tocsr(), w


def _axis_operator(n: int, order: int, periodic: bool, dx: float):
    stencil = order + (order % 2)
    if stencil not in SUPPORTED_ORDERS:
        raise OperatorError(f"unsupported order {order}; supported: {SUPPORTED_ORDERS} (odd orders round up)")
    if n < stencil + 1:
        raise OperatorError(f"need at least {stencil + 1} nodes per dimension for order {order}, got {n}")
    if periodic:
        Q = _periodic_q(n, stencil)
        w = np.ones(n)
        B = np.zeros(n)
    else:
        Q, w = _bounded_q_and_norm(n, stencil)
        B = np.zeros(n)
        B[0], B[-1] = -1.0, 1.0
    return Q, w * dx, B


def build_operator(order: int, grid: Grid) -> SbpOperator:
    """Assemble per-dimension SBP operators on ``grid``.

    Odd ``order`` uses the centered stencil of the next even order.
    """
    if order < 2:
        raise OperatorError(f"unsupported order {order}")
    axes = [
        _axis_operator(n, order, per, dx)
        for n, per, dx in zip(grid.nodes_per_dim, grid.periodic, grid.spacing)
    ]
    # 1D mass and Q on each axis; tensor up
    masses = [a[1] for a in axes]
    mass = masses[0]
    for m in masses[1:]:
        mass = np.kron(mass, m)
    qs, Bs = [], []
    for k, (Qk, wk, Bk) in enumerate(axes):
        # Q_k acts on axis k and is weighted by the norm of the other axes
        factors_q, factors_b = [], []
        for m in range(grid.dim):
            if m == k:
                factors_q.append(Qk)
                factors_b.append(Bk)
            else:
                factors_q.append(sp.diags(masses[m]))
                factors_b.append(masses[m])
        Q = factors_q[0]
        Bd = factors_b[0]
        for fq, fb in zip(factors_q[1:], factors_b[1:]):
            Q = sp.kron(Q, fq)
            Bd = np.kron(Bd, fb)
        qs.append(sp.csr_matrix(Q))
        Bs.append(np.asarray(Bd, dtype=float))
    inv_m = sp.diags(1.0 / mass)
    ders = tuple(sp.csr_matrix(inv_m @ Q) for Q in qs)
    return SbpOperator(order, grid, ders, mass, tuple(Bs), tuple(qs))


def build_normal_table(op: SbpOperator) -> NormalTable:
    d = op.grid.dim
    n = op.grid.n
    skew = [sp.coo_matrix(sp.triu(Q - Q.T, k=1)) for Q in op.q]
    pairs: dict[tuple[int, int], np.ndarray] = {}
    for k, S in enumerate(skew):
        for i, j, v in zip(S.row, S.col, S.data):
            if v == 0.0:
                continue
            key = (int(i), int(j))
            if key not in pairs:
                pairs[key] = np.zeros(d)
            pairs[key][k] = v
    shape = op.grid.nodes_per_dim
    oriented = {}
    for (i, j), nij in pairs.items():
        ci, cj = np.unravel_index(i, shape), np.unravel_index(j, shape)
        k = int(np.flatnonzero(np.asarray(cj) != np.asarray(ci))[0])
        off = int(cj[k] - ci[k])
        if op.grid.periodic[k] and abs(off) > shape[k] // 2:
            off -= int(np.sign(off)) * shape[k]
        if off > 0:
            oriented[(i, j)] = (nij, k, off)
        else:
            oriented[(j, i)] = (-nij, k, -off)
    keys = sorted(oriented)
    tail = np.array([k[0] for k in keys], dtype=np.int64)
    head = np.array([k[1] for k in keys], dtype=np.int64)
    normals = np.array([oriented[k][0] for k in keys]).reshape(len(keys), d)
    boundary = np.stack(op.boundary, axis=-1)

    # per node: (axis, signed offset to the neighbour, edge, sign)
    entries: list[list[tuple[int, int, int, int]]] = [[] for _ in range(n)]
    for e, key in enumerate(keys):
        _, k, off = oriented[key]
        entries[key[0]].append((k, off, e, 1))
        entries[key[1]].append((k, -off, e, -1))
    K = max((len(x) for x in entries), default=0)
    slot_edge = np.full((n, K), -1, dtype=np.int64)
    slot_sign = np.zeros((n, K), dtype=np.int64)
    for i, row in enumerate(entries):
        for s, (_, _, e, sign) in enumerate(sorted(row)):
            slot_edge[i, s] = e
            slot_sign[i, s] = sign
    return NormalTable(tail, head, normals, boundary, slot_edge, slot_sign, n)


def apply_derivative(op: SbpOperator, values: np.ndarray, dim: int = 0) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape[0] != op.grid.n:
        raise ValueError(f"field has {values.shape[0]} entries, grid has {op.grid.n} nodes")
    return op.derivative[dim] @ values


def dump_operator_csv(op: SbpOperator, directory: str | Path) -> list[Path]:
    """Write ``D_k``, ``M`` and ``B_k`` as (row, col, value) triplets."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []

    def _write(name: str, rows, cols, vals) -> None:
        path = directory / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "value"])
            for r, c, v in zip(rows, cols, vals):
                w.writerow([int(r), int(c), repr(float(v))])
        written.append(path)

    idx = np.arange(op.grid.n)
    _write("M.csv", idx, idx, op.mass)
    for k, (D, B) in enumerate(zip(op.derivative, op.boundary)):
        C = D.tocoo()
        _write(f"D{k + 1}.csv", C.row, C.col, C.data)
        nz = np.nonzero(B)[0]
        _write(f"B{k + 1}.csv", nz, nz, B[nz])
    return written
