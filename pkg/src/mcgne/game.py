"""Multi-cluster game model.

Indexing conventions (all 0-based internally, leader = local index 0):

* ``x`` (length ``q``) stacks the true strategies cluster by cluster, agent by
  agent: block ``(j, i)`` starts at ``cluster_offset[j] + i * q_j``.
* ``x_hat`` (length ``n * q``) stacks one full ``q``-copy per agent in the same
  agent order; agent ``a`` owns ``x_hat[a*q:(a+1)*q]``.
* Within a copy, the block belonging to the agent's own cluster holds true
  values (shared inside the cluster); the rest are estimates.

The own-strategy selector and the cluster-stripping selector are kept as index
arrays; :func:`dense_selectors` materializes them for tests only.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .graph import ClusterTopology, LaplacianSet, validate_topology

SYNC_TOL = 1e-12


class GameError(ValueError):
    """Invalid game data."""


class UnsynchronizedError(GameError):
    """An estimate vector whose own-cluster blocks disagree with the owners."""


@dataclass(frozen=True)
class Dimensions:
    cluster_sizes: tuple[int, ...]
    strategy_dims: tuple[int, ...]
    w: int
    m: int = field(init=False, repr=False, compare=False)
    n: int = field(init=False, repr=False, compare=False)
    q: int = field(init=False, repr=False, compare=False)
    est_dim: int = field(init=False, repr=False, compare=False)
    xi: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.cluster_sizes)
        dims = tuple(int(d) for d in self.strategy_dims)
        if len(sizes) != len(dims) or not sizes:
            raise GameError("cluster_sizes and strategy_dims must be non-empty and of equal length")
        if min(sizes) < 1 or min(dims) < 1 or int(self.w) < 0:
            raise GameError("cluster sizes and strategy dimensions must be positive, w nonnegative")
        object.__setattr__(self, "cluster_sizes", sizes)
        object.__setattr__(self, "strategy_dims", dims)
        object.__setattr__(self, "w", int(self.w))
        # derived sizes are read in every operator call, so store them once
        object.__setattr__(self, "m", len(sizes))
        object.__setattr__(self, "n", sum(sizes))
        object.__setattr__(self, "q", sum(s * d for s, d in zip(sizes, dims)))
        object.__setattr__(self, "est_dim", self.n * self.q)
        object.__setattr__(self, "xi", sum(s * s * d for s, d in zip(sizes, dims)))

    def agents(self) -> list[tuple[int, int]]:
        return [(j, i) for j, s in enumerate(self.cluster_sizes) for i in range(s)]


class EstimateLayout:
    """Index maps for the estimate vector ``x_hat``."""

    def __init__(self, dims: Dimensions):
        self.dims = dims
        q = dims.q
        sizes, qd = dims.cluster_sizes, dims.strategy_dims
        self.cluster_offset = np.concatenate(([0], np.cumsum([s * d for s, d in zip(sizes, qd)]))).astype(int)
        self.agent_start = np.concatenate(([0], np.cumsum(sizes))).astype(int)
        agent_cluster, agent_local = [], []
        for j, s in enumerate(sizes):
            agent_cluster += [j] * s
            agent_local += list(range(s))
        self.agent_cluster = np.array(agent_cluster, dtype=int)
        self.agent_local = np.array(agent_local, dtype=int)

        r_idx, s_idx, dst, src = [], [], [], []
        for a, (j, i) in enumerate(zip(agent_cluster, agent_local)):
            base = a * q
            lo, hi = self.cluster_offset[j], self.cluster_offset[j + 1]
            own = self.x_slice(j, i)
            r_idx.extend(range(base + own.start, base + own.stop))
            s_idx.extend(range(base, base + lo))
            s_idx.extend(range(base + hi, base + q))
            dst.extend(range(base + lo, base + hi))
            src.extend(range(lo, hi))
        self.r_index = np.array(r_idx, dtype=int)
        self.s_index = np.array(s_idx, dtype=int)
        self.sync_dst = np.array(dst, dtype=int)
        self.sync_src = np.array(src, dtype=int)
        self.leader_x_index = [
            np.arange(self.cluster_offset[j], self.cluster_offset[j] + qd[j]) for j in range(dims.m)
        ]

    def agent_index(self, j: int, i: int) -> int:
        return int(self.agent_start[j] + i)

    def x_slice(self, j: int, i: int) -> slice:
        d = self.dims.strategy_dims[j]
        start = int(self.cluster_offset[j] + i * d)
        return slice(start, start + d)

    def cluster_slice(self, j: int) -> slice:
        return slice(int(self.cluster_offset[j]), int(self.cluster_offset[j + 1]))

    def copy_slice(self, a: int) -> slice:
        q = self.dims.q
        return slice(a * q, (a + 1) * q)

    def _check(self, x_hat: np.ndarray) -> np.ndarray:
        x_hat = np.asarray(x_hat, dtype=float)
        if x_hat.shape != (self.dims.est_dim,):
            raise GameError(f"estimate vector must have length {self.dims.est_dim}, got {x_hat.shape}")
        return x_hat

    def own_strategies(self, x_hat: np.ndarray) -> np.ndarray:
        return self._check(x_hat)[self.r_index]

    def strip_own_cluster(self, x_hat: np.ndarray) -> np.ndarray:
        return self._check(x_hat)[self.s_index]

    def assemble(self, own: np.ndarray, stripped: np.ndarray, own_cluster_fill: np.ndarray | None = None) -> np.ndarray:
        """Inverse of the two selectors.

        Own-cluster entries not owned by the agent are taken from
        ``own_cluster_fill`` (an ``x_hat``-shaped vector) or rebuilt from
        ``own`` when omitted.
        """
        out = np.zeros(self.dims.est_dim) if own_cluster_fill is None else np.array(own_cluster_fill, dtype=float)
        if own_cluster_fill is None:
            out[self.sync_dst] = np.asarray(own)[self.sync_src]
        out[self.r_index] = own
        out[self.s_index] = stripped
        return out

    def synchronize(self, x_hat: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """Overwrite own-cluster blocks of every copy with the owners' values."""
        x_hat = self._check(x_hat)
        if out is None:
            out = x_hat.copy()
        elif out is not x_hat:
            out[...] = x_hat
        out[self.sync_dst] = x_hat[self.r_index][self.sync_src]
        return out

    def sync_defect(self, x_hat: np.ndarray) -> float:
        x_hat = self._check(x_hat)
        if not self.sync_dst.size:
            return 0.0
        return float(np.max(np.abs(x_hat[self.sync_dst] - x_hat[self.r_index][self.sync_src])))

    def consensus(self, x: np.ndarray) -> np.ndarray:
        """``1_n ⊗ x``."""
        return np.tile(np.asarray(x, dtype=float), self.dims.n)


def dense_selectors(layout: EstimateLayout) -> tuple[np.ndarray, np.ndarray]:
    """Dense 0/1 versions of the own-strategy and cluster-stripping selectors (debug only)."""
    N = layout.dims.est_dim
    R = np.zeros((layout.r_index.size, N))
    R[np.arange(layout.r_index.size), layout.r_index] = 1.0
    S = np.zeros((layout.s_index.size, N))
    S[np.arange(layout.s_index.size), layout.s_index] = 1.0
    return R, S


# -- payoffs -------------------------------------------------------------------

class PayoffModel:
    """Smooth parts of the agents' payoffs.

    Subclasses provide ``value(j, i, x_full)`` for ``f_i^j`` at a full
    strategy profile and ``extended(copies)`` returning the extended
    pseudo-gradient given an ``(n, q)`` array of per-agent copies.
    """

    is_quadratic = False

    def __init__(self, dims: Dimensions):
        self.dims = dims
        self.layout = EstimateLayout(dims)

    def value(self, j: int, i: int, x_full: np.ndarray) -> float:
        raise NotImplementedError

    def extended(self, copies: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class QuadraticPayoff(PayoffModel):
    """``f_i^j(x) = 0.5 x^T H_i^j x + g_i^j . x + offset_i^j`` over the full profile.

    ``hessians``, ``linear`` and ``offsets`` are indexed by flat agent number.
    The own block of every Hessian must be positive semidefinite so that each
    payoff is convex in the agent's own decision.
    """

    is_quadratic = True

    def __init__(self, dims: Dimensions, hessians: Sequence[np.ndarray], linear: Sequence[np.ndarray],
                 offsets: Sequence[float] | None = None):
        super().__init__(dims)
        n, q = dims.n, dims.q
        H = np.array(hessians, dtype=float)
        g = np.array(linear, dtype=float)
        if H.shape != (n, q, q):
            raise GameError(f"expected {n} Hessians of shape ({q}, {q}), got {H.shape}")
        if g.shape != (n, q):
            raise GameError(f"expected {n} linear terms of length {q}, got {g.shape}")
        if not np.allclose(H, np.transpose(H, (0, 2, 1)), rtol=0, atol=1e-12 * max(1.0, np.abs(H).max(initial=0))):
            raise GameError("payoff Hessians must be symmetric")
        lay = self.layout
        for a, (j, i) in enumerate(dims.agents()):
            s = lay.x_slice(j, i)
            own = H[a][s, s]
            if np.linalg.eigvalsh(own).min() < -1e-10 * max(1.0, np.abs(own).max()):
                raise GameError(f"payoff of agent ({j + 1}, {i + 1}) is not convex in its own decision")
        self.hessians = H
        self.linear = g
        self.offsets = np.zeros(n) if offsets is None else np.array(offsets, dtype=float)

        # F(x_hat) = E x_hat + e0 with E block-sparse: agent a's rows only read its own copy
        E = np.zeros((q, n * q))
        e0 = np.zeros(q)
        starts = lay.agent_start
        for j in range(dims.m):
            members = range(starts[j], starts[j + 1])
            Hj = H[list(members)].sum(axis=0)
            gj = g[list(members)].sum(axis=0)
            for i in range(dims.cluster_sizes[j]):
                a = starts[j] + i
                s = lay.x_slice(j, i)
                E[s, lay.copy_slice(a)] = Hj[s]
                e0[s] = gj[s]
        self.ext_matrix = E
        self.ext_offset = e0

    def value(self, j, i, x_full):
        a = self.layout.agent_index(j, i)
        x = np.asarray(x_full, dtype=float)
        return float(0.5 * x @ self.hessians[a] @ x + self.linear[a] @ x + self.offsets[a])

    def extended(self, copies):
        return self.ext_matrix @ copies.ravel() + self.ext_offset

    def affine_full(self) -> tuple[np.ndarray, np.ndarray]:
        """``(M, m0)`` with ``F(x) = M x + m0``."""
        n, q = self.dims.n, self.dims.q
        M = self.ext_matrix.reshape(q, n, q).sum(axis=1)
        return M, self.ext_offset.copy()

    def affine_extended(self) -> tuple[np.ndarray, np.ndarray]:
        return self.ext_matrix.copy(), self.ext_offset.copy()


ValueFn = Callable[[int, int, np.ndarray], float]
GradFn = Callable[[int, int, np.ndarray], np.ndarray]


class CallbackPayoff(PayoffModel):
    """User-supplied payoff values and cluster gradients.

    ``value_fn(j, i, x_full)`` returns ``f_i^j`` and ``grad_fn(j, i, x_full)``
    its gradient with respect to the whole cluster block ``x^j`` (length
    ``n_j * q_j``). The gradient is checked against central differences at
    construction.
    """

    def __init__(self, dims: Dimensions, value_fn: ValueFn, grad_fn: GradFn, *,
                 check_points: int = 3, check_rtol: float = 1e-5, seed: int = 0):
        super().__init__(dims)
        self.value_fn = value_fn
        self.grad_fn = grad_fn
        if check_points:
            self._fd_check(check_points, check_rtol, seed)

    def _fd_check(self, points, rtol, seed):
        rng = np.random.default_rng(seed)
        lay = self.layout
        for _ in range(points):
            x = rng.standard_normal(self.dims.q)
            for j, i in self.dims.agents():
                cs = lay.cluster_slice(j)
                g = np.asarray(self.grad_fn(j, i, x), dtype=float)
                if g.shape != (cs.stop - cs.start,):
                    raise GameError(f"gradient of agent ({j + 1}, {i + 1}) has shape {g.shape}")
                fd = central_difference(lambda y: self.value_fn(j, i, y), x, cs)
                err = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1.0)
                if err > rtol:
                    raise GameError(
                        f"gradient of agent ({j + 1}, {i + 1}) fails the finite-difference check (rel err {err:.2e})"
                    )

    def value(self, j, i, x_full):
        return float(self.value_fn(j, i, np.asarray(x_full, dtype=float)))

    def extended(self, copies):
        lay = self.layout
        out = np.zeros(self.dims.q)
        for a, (j, i) in enumerate(self.dims.agents()):
            d = self.dims.strategy_dims[j]
            total = np.zeros(self.dims.cluster_sizes[j] * d)
            for xi in range(self.dims.cluster_sizes[j]):
                total += np.asarray(self.grad_fn(j, xi, copies[a]), dtype=float)
            out[lay.x_slice(j, i)] = total[i * d:(i + 1) * d]
        return out


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, coords: slice | np.ndarray,
                       h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` over ``coords``."""
    idx = np.arange(x.size)[coords]
    out = np.empty(idx.size)
    for k, c in enumerate(idx):
        step = h * max(1.0, abs(x[c]))
        xp = x.copy()
        xm = x.copy()
        xp[c] += step
        xm[c] -= step
        out[k] = (f(xp) - f(xm)) / (2 * step)
    return out


# -- sets and constraints --------------------------------------------------------

@dataclass(frozen=True)
class BoxSet:
    """Local feasible box of one agent; bounds may be infinite."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).ravel()
        hi = np.array(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise GameError("box bounds must have equal length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise GameError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise GameError("box is empty (lower > upper)")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def free(cls, dim: int) -> "BoxSet":
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def contains(self, v: np.ndarray, tol: float = 0.0) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))

    def midpoint(self) -> np.ndarray:
        mid = np.zeros_like(self.lower)
        both = np.isfinite(self.lower) & np.isfinite(self.upper)
        mid[both] = 0.5 * (self.lower[both] + self.upper[both])
        lo_only = np.isfinite(self.lower) & ~np.isfinite(self.upper)
        hi_only = ~np.isfinite(self.lower) & np.isfinite(self.upper)
        mid[lo_only] = np.maximum(self.lower[lo_only], 0.0)
        mid[hi_only] = np.minimum(self.upper[hi_only], 0.0)
        return mid


@dataclass(frozen=True)
class CouplingConstraint:
    """Shared constraint ``sum_j A^j x_1^j <= sum_j b^j`` on cluster leaders."""

    A: tuple[np.ndarray, ...]
    b: tuple[np.ndarray, ...]

    def __post_init__(self):
        A = tuple(np.atleast_2d(np.array(a, dtype=float)) for a in self.A)
        b = tuple(np.array(v, dtype=float).ravel() for v in self.b)
        if len(A) != len(b):
            raise GameError("need one A^j and one b^j per cluster")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def none(cls, dims: Dimensions) -> "CouplingConstraint":
        return cls(tuple(np.zeros((dims.w, d)) for d in dims.strategy_dims),
                   tuple(np.zeros(dims.w) for _ in range(dims.m)))

    @property
    def b_total(self) -> np.ndarray:
        return np.sum(self.b, axis=0)

    @property
    def b_stacked(self) -> np.ndarray:
        return np.concatenate(self.b) if self.b else np.zeros(0)

    @property
    def delta(self) -> float:
        """Largest singular value over all ``A^j``."""
        return max((float(np.linalg.norm(a, 2)) if a.size else 0.0) for a in self.A)


ProxFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True, eq=False)
class GameSpec:
    dims: Dimensions
    payoffs: PayoffModel
    boxes: tuple[BoxSet, ...]
    coupling: CouplingConstraint
    topology: ClusterTopology
    # optional non-indicator regularizers: (j, i) -> prox(v, step)
    prox_overrides: dict = field(default_factory=dict)

    layout: EstimateLayout = field(init=False, repr=False)
    laplacians: LaplacianSet = field(init=False, repr=False)
    lower: np.ndarray = field(init=False, repr=False)
    upper: np.ndarray = field(init=False, repr=False)
    Lambda: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = self.dims
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if self.payoffs.dims != d:
            raise GameError("payoff model dimensions do not match the game")
        if len(self.boxes) != d.n:
            raise GameError(f"expected {d.n} boxes, got {len(self.boxes)}")
        for (j, i), box in zip(d.agents(), self.boxes):
            if box.lower.size != d.strategy_dims[j]:
                raise GameError(f"box of agent ({j + 1}, {i + 1}) has wrong dimension")
        if len(self.coupling.A) != d.m:
            raise GameError("coupling constraint must have one block per cluster")
        for j, (a, b) in enumerate(zip(self.coupling.A, self.coupling.b)):
            if a.shape != (d.w, d.strategy_dims[j]) or b.shape != (d.w,):
                raise GameError(f"coupling block of cluster {j + 1} has shape {a.shape}/{b.shape}")
        if self.topology.cluster_sizes != d.cluster_sizes:
            raise GameError("topology cluster sizes do not match the game")
        verdict = validate_topology(self.topology)
        if not verdict:
            raise GameError(verdict.message)

        lay = EstimateLayout(d)
        object.__setattr__(self, "layout", lay)
        object.__setattr__(self, "laplacians", LaplacianSet.from_topology(self.topology))
        object.__setattr__(self, "lower", np.concatenate([b.lower for b in self.boxes]))
        object.__setattr__(self, "upper", np.concatenate([b.upper for b in self.boxes]))
        Lam = np.zeros((d.w * d.m, d.q))
        for j, a in enumerate(self.coupling.A):
            Lam[j * d.w:(j + 1) * d.w, lay.leader_x_index[j]] = a
        object.__setattr__(self, "Lambda", Lam)

    def box(self, j: int, i: int) -> BoxSet:
        return self.boxes[self.layout.agent_index(j, i)]


# -- operations ---------------------------------------------------------------------

def own_strategies(spec: GameSpec, x_hat: np.ndarray) -> np.ndarray:
    return spec.layout.own_strategies(x_hat)


def strip_own_cluster(spec: GameSpec, x_hat: np.ndarray) -> np.ndarray:
    return spec.layout.strip_own_cluster(x_hat)


def synchronize_cluster_blocks(spec: GameSpec, x_hat: np.ndarray) -> np.ndarray:
    return spec.layout.synchronize(x_hat)


def extended_pseudogradient(spec: GameSpec, x_hat: np.ndarray, check: bool = True) -> np.ndarray:
    """Stacked per-agent cluster gradients, each evaluated on the agent's own copy."""
    x_hat = spec.layout._check(x_hat)
    if check:
        defect = spec.layout.sync_defect(x_hat)
        if defect > SYNC_TOL * max(1.0, float(np.abs(x_hat).max(initial=0.0))):
            raise UnsynchronizedError(f"own-cluster estimate blocks disagree with owners by {defect:.3e}")
    return spec.payoffs.extended(x_hat.reshape(spec.dims.n, spec.dims.q))


def full_pseudogradient(spec: GameSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.dims.q,):
        raise GameError(f"strategy vector must have length {spec.dims.q}, got {x.shape}")
    return spec.payoffs.extended(np.tile(x, (spec.dims.n, 1)))


def prox_h(spec: GameSpec, j: int, i: int, v: np.ndarray, step: float) -> np.ndarray:
    if not step > 0:
        raise GameError("prox step must be positive")
    override = spec.prox_overrides.get((j, i))
    if override is not None:
        return np.asarray(override(np.asarray(v, dtype=float), step), dtype=float)
    box = spec.box(j, i)
    return np.clip(v, box.lower, box.upper)


def prox_all(spec: GameSpec, x: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """``prox_h`` applied to every own block of ``x`` (``steps`` per coordinate)."""
    out = np.clip(x, spec.lower, spec.upper)
    for (j, i), fn in spec.prox_overrides.items():
        s = spec.layout.x_slice(j, i)
        out[s] = fn(np.asarray(x[s], dtype=float), float(steps[s.start]))
    return out


def payoff_value(spec: GameSpec, j: int, i: int, x_hat_i: np.ndarray) -> float:
    """``f_i^j`` at agent ``(j, i)``'s copy; ``inf`` when the own decision leaves its box."""
    x_hat_i = np.asarray(x_hat_i, dtype=float)
    if x_hat_i.shape != (spec.dims.q,):
        raise GameError(f"agent copy must have length {spec.dims.q}")
    own = x_hat_i[spec.layout.x_slice(j, i)]
    if (j, i) not in spec.prox_overrides and not spec.box(j, i).contains(own):
        return math.inf
    return spec.payoffs.value(j, i, x_hat_i)
