"""Energy-Internet benchmark: energy subnets (clusters) of prosumers (agents)
competing for ``w`` utility markets.

Prosumer ``(j, i)`` pays

    f_i^j(x) = x_i^T Q_i x_i + q_i^T x_i - o * i - (p_i - d_i * (T x))^T T_i x_i

with ``T = [T_1^1, ..., T_{n_m}^m]`` the stacked 0/1 allocation matrices, and
stores energy in the box ``[0, r_i]``. Only the leaders of the subnets carry
the shared constraint ``sum_j A^j x_1^j <= sum_j b^j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .game import (
    BoxSet,
    CallbackPayoff,
    CouplingConstraint,
    Dimensions,
    EstimateLayout,
    GameError,
    GameSpec,
    QuadraticPayoff,
)
from .graph import ClusterTopology

DEFAULT_SIZES = (4, 2, 3)
DEFAULT_W = 2
DEFAULT_Q = 2


@dataclass(frozen=True)
class ParameterRanges:
    """Open sampling intervals for the uniformly drawn scenario data."""

    r: tuple[float, float] = (5.0, 10.0)
    b: tuple[float, float] = (1.0, 2.0)
    p: tuple[float, float] = (10.0, 20.0)
    d: tuple[float, float] = (1.0, 3.0)
    q: tuple[float, float] = (1.0, 2.0)
    Q: tuple[float, float] = (1.0, 8.0)
    A: tuple[float, float] = (0.0, 1.0)
    o: float = 3.0

    def __post_init__(self):
        for f in fields(self):
            if f.name == "o":
                continue
            lo, hi = getattr(self, f.name)
            if not float(lo) < float(hi):
                raise GameError(f"range for {f.name} must have lower < upper, got ({lo}, {hi})")
            object.__setattr__(self, f.name, (float(lo), float(hi)))
        object.__setattr__(self, "o", float(self.o))

    def to_dict(self) -> dict:
        return {f.name: (list(getattr(self, f.name)) if f.name != "o" else self.o) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ParameterRanges":
        return cls(**{k: (tuple(v) if k != "o" else v) for k, v in data.items()})


@dataclass
class EIScenario:
    dims: Dimensions
    Q: list[np.ndarray]          # diagonal q_j x q_j, per flat agent
    q_lin: list[np.ndarray]      # q_j
    r: list[np.ndarray]          # q_j, box upper bounds
    p: list[np.ndarray]          # w
    d: list[np.ndarray]          # w
    T: list[np.ndarray]          # w x q_j, one 1 per column
    A: list[np.ndarray]          # w x q_j, per cluster
    b: list[np.ndarray]          # w, per cluster
    o: float
    seed: int | None = None
    ranges: ParameterRanges = field(default_factory=ParameterRanges)

    def __post_init__(self):
        self.layout = EstimateLayout(self.dims)
        d = self.dims
        T = np.zeros((d.w, d.q))
        for a, (j, i) in enumerate(d.agents()):
            T[:, self.layout.x_slice(j, i)] = self.T[a]
        self.T_full = T

    def to_dict(self) -> dict:
        d = self.dims
        return {
            "seed": self.seed,
            "sizes": list(d.cluster_sizes),
            "strategy_dims": list(d.strategy_dims),
            "w": d.w,
            "o": self.o,
            "ranges": self.ranges.to_dict(),
            "Q_diag": [np.diag(v).tolist() for v in self.Q],
            "q": [v.tolist() for v in self.q_lin],
            "r": [v.tolist() for v in self.r],
            "p": [v.tolist() for v in self.p],
            "d": [v.tolist() for v in self.d],
            "T": [v.tolist() for v in self.T],
            "A": [v.tolist() for v in self.A],
            "b": [v.tolist() for v in self.b],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EIScenario":
        dims = Dimensions(tuple(data["sizes"]), tuple(data["strategy_dims"]), data["w"])
        arr = lambda key: [np.array(v, dtype=float) for v in data[key]]
        sc = cls(dims, [np.diag(v) for v in arr("Q_diag")], arr("q"), arr("r"), arr("p"), arr("d"),
                 [np.atleast_2d(v) for v in arr("T")], [np.atleast_2d(v) for v in arr("A")], arr("b"),
                 float(data["o"]), data.get("seed"),
                 ParameterRanges.from_dict(data["ranges"]) if "ranges" in data else ParameterRanges())
        sc.validate()
        return sc

    def validate(self) -> None:
        d = self.dims
        n = d.n
        for name in ("Q", "q_lin", "r", "p", "d", "T"):
            if len(getattr(self, name)) != n:
                raise GameError(f"scenario field {name} needs {n} entries")
        if len(self.A) != d.m or len(self.b) != d.m:
            raise GameError("scenario needs one A^j and b^j per subnet")
        for a, (j, _) in enumerate(d.agents()):
            qj = d.strategy_dims[j]
            if self.T[a].shape != (d.w, qj):
                raise GameError(f"allocation matrix of agent {a} must be {d.w} x {qj}")
            if not np.array_equal(self.T[a].sum(axis=0), np.ones(qj)) or not np.all(np.isin(self.T[a], (0.0, 1.0))):
                raise GameError(f"allocation matrix of agent {a} must have exactly one 1 per column")


def allocation_matrix(w: int, q_j: int, rng: np.random.Generator | None) -> np.ndarray:
    """Columns assigned round-robin over utilities; identity when ``q_j == w``.

    For ``q_j != w`` the column order is shuffled with ``rng``.
    """
    T = np.zeros((w, q_j))
    T[np.arange(q_j) % w, np.arange(q_j)] = 1.0
    if q_j != w and rng is not None:
        T = T[:, rng.permutation(q_j)]
    return T


def generate_scenario(seed: int = 0, sizes=DEFAULT_SIZES, w: int = DEFAULT_W, q_j=DEFAULT_Q,
                      ranges: ParameterRanges | None = None) -> EIScenario:
    """Draw every scenario parameter from ``numpy.random.default_rng(seed)`` in a fixed order."""
    ranges = ranges or ParameterRanges()
    sizes = tuple(int(s) for s in sizes)
    qd = tuple(int(v) for v in q_j) if np.ndim(q_j) else (int(q_j),) * len(sizes)
    if int(w) < 1:
        raise GameError("at least one utility market is required")
    dims = Dimensions(sizes, qd, int(w))
    rng = np.random.default_rng(seed)
    Q, ql, r, p, d, T = [], [], [], [], [], []
    for j, _ in dims.agents():
        k = qd[j]
        Q.append(np.diag(rng.uniform(*ranges.Q, size=k)))
        ql.append(rng.uniform(*ranges.q, size=k))
        r.append(rng.uniform(*ranges.r, size=k))
        p.append(rng.uniform(*ranges.p, size=dims.w))
        d.append(rng.uniform(*ranges.d, size=dims.w))
        T.append(allocation_matrix(dims.w, k, rng))
    A = [rng.uniform(*ranges.A, size=(dims.w, qd[j])) for j in range(dims.m)]
    b = [rng.uniform(*ranges.b, size=dims.w) for _ in range(dims.m)]
    sc = EIScenario(dims, Q, ql, r, p, d, T, A, b, ranges.o, int(seed), ranges)
    sc.validate()
    return sc


# -- payoffs -------------------------------------------------------------------------

def _full_profile(sc: EIScenario, j: int, x_cluster: np.ndarray, x_est_other: np.ndarray) -> np.ndarray:
    """Rebuild a full strategy vector from the own subnet block and estimates of the rest."""
    lay = sc.layout
    cs = lay.cluster_slice(j)
    x = np.empty(sc.dims.q)
    x[cs] = x_cluster
    mask = np.ones(sc.dims.q, dtype=bool)
    mask[cs] = False
    x[mask] = x_est_other
    return x


def ei_payoff_value(sc: EIScenario, j: int, i: int, x_full: np.ndarray) -> float:
    a = sc.layout.agent_index(j, i)
    xi = x_full[sc.layout.x_slice(j, i)]
    price = sc.p[a] - sc.d[a] * (sc.T_full @ x_full)
    return float(xi @ sc.Q[a] @ xi + sc.q_lin[a] @ xi - sc.o * (i + 1) - price @ (sc.T[a] @ xi))


def _cluster_gradient_full(sc: EIScenario, j: int, i: int, x_full: np.ndarray) -> np.ndarray:
    """Gradient of ``f_i^j`` with respect to the whole subnet block ``x^j``."""
    lay = sc.layout
    a = lay.agent_index(j, i)
    xi = x_full[lay.x_slice(j, i)]
    Tx = sc.T_full @ x_full
    cs = lay.cluster_slice(j)
    # bilinear term (d_i * T x)^T T_i x_i differentiated through T x
    grad = sc.T_full[:, cs].T @ (sc.d[a] * (sc.T[a] @ xi))
    own = lay.x_slice(j, i)
    rel = slice(own.start - cs.start, own.stop - cs.start)
    grad[rel] += 2 * sc.Q[a] @ xi + sc.q_lin[a] - sc.T[a].T @ sc.p[a] + sc.T[a].T @ (sc.d[a] * Tx)
    return grad


def ei_payoff_gradient(sc: EIScenario, j: int, i: int, x_cluster: np.ndarray, x_est_other: np.ndarray) -> np.ndarray:
    """``sum_xi grad_{x_i^j} f_xi^j`` at agent ``(j, i)``'s view of the profile.

    Closed form: ``2 Q_i x_i + q_i - T_i^T p_i + T_i^T (d_i * T x)
    + sum_{xi in subnet j} T_i^T (d_xi * T_xi x_xi)``.
    """
    lay = sc.layout
    x = _full_profile(sc, j, np.asarray(x_cluster, dtype=float), np.asarray(x_est_other, dtype=float))
    a = lay.agent_index(j, i)
    xi = x[lay.x_slice(j, i)]
    Ti = sc.T[a]
    g = 2 * sc.Q[a] @ xi + sc.q_lin[a] - Ti.T @ sc.p[a] + Ti.T @ (sc.d[a] * (sc.T_full @ x))
    start = lay.agent_start[j]
    for k in range(sc.dims.cluster_sizes[j]):
        b = start + k
        g += Ti.T @ (sc.d[b] * (sc.T[b] @ x[lay.x_slice(j, k)]))
    return g


def ei_quadratic_payoff(sc: EIScenario) -> QuadraticPayoff:
    """Exact quadratic form of every prosumer's payoff over the full profile."""
    d = sc.dims
    lay = sc.layout
    H = np.zeros((d.n, d.q, d.q))
    g = np.zeros((d.n, d.q))
    off = np.zeros(d.n)
    for a, (j, i) in enumerate(d.agents()):
        s = lay.x_slice(j, i)
        E = np.zeros((d.strategy_dims[j], d.q))
        E[:, s] = np.eye(d.strategy_dims[j])
        C = sc.T_full.T @ np.diag(sc.d[a]) @ sc.T[a] @ E
        H[a] = 2 * E.T @ sc.Q[a] @ E + C + C.T
        g[a] = E.T @ (sc.q_lin[a] - sc.T[a].T @ sc.p[a])
        off[a] = -sc.o * (i + 1)
    return QuadraticPayoff(d, H, g, off)


def ei_callback_payoff(sc: EIScenario, **kwargs) -> CallbackPayoff:
    """Second code path through the same payoffs (analytic values and cluster gradients)."""
    return CallbackPayoff(sc.dims, lambda j, i, x: ei_payoff_value(sc, j, i, x),
                          lambda j, i, x: _cluster_gradient_full(sc, j, i, x), **kwargs)


def build_ei_gamespec(sc: EIScenario, topology: ClusterTopology | None = None,
                      payoff: str = "quadratic") -> GameSpec:
    """GameSpec with boxes ``[0, r]`` and complete communication graphs unless given."""
    d = sc.dims
    topology = topology or ClusterTopology.complete(d.cluster_sizes)
    if payoff == "quadratic":
        pay = ei_quadratic_payoff(sc)
    elif payoff == "callback":
        pay = ei_callback_payoff(sc)
    else:
        raise GameError(f"unknown payoff model {payoff!r}")
    boxes = [BoxSet(np.zeros_like(r), r) for r in sc.r]
    return GameSpec(d, pay, boxes, CouplingConstraint(tuple(sc.A), tuple(sc.b)), topology)


def default_ei_spec(seed: int = 0) -> tuple[EIScenario, GameSpec]:
    sc = generate_scenario(seed)
    return sc, build_ei_gamespec(sc)


# -- figure quantities ------------------------------------------------------------------

def intra_cluster_errors(spec: GameSpec, x: np.ndarray) -> np.ndarray:
    """Per subnet ``1/(n_j - 1) sum_{i>=2} ||x_1^j - x_i^j||`` (0 for single-agent subnets)."""
    lay = spec.layout
    out = np.zeros(spec.dims.m)
    for j, s in enumerate(spec.dims.cluster_sizes):
        if s > 1:
            lead = x[lay.x_slice(j, 0)]
            out[j] = sum(np.linalg.norm(lead - x[lay.x_slice(j, i)]) for i in range(1, s)) / (s - 1)
    return out


def cluster_distance_errors(spec: GameSpec, x: np.ndarray, x_star: np.ndarray) -> np.ndarray:
    """Per subnet ``1/n_j sum_i ||x_i^j - x_i^{j*}||``."""
    lay = spec.layout
    return np.array([
        sum(np.linalg.norm(x[lay.x_slice(j, i)] - x_star[lay.x_slice(j, i)]) for i in range(s)) / s
        for j, s in enumerate(spec.dims.cluster_sizes)
    ])


def estimate_error_of(spec: GameSpec, x_hat: np.ndarray, x_star: np.ndarray, j: int, i: int) -> float:
    """``sum over agents outside subnet j of ||estimate of x_i^j - x_i^{j*}||``."""
    lay = spec.layout
    d = spec.dims
    X = x_hat.reshape(d.n, d.q)
    s = lay.x_slice(j, i)
    total = 0.0
    for a, (jj, _) in enumerate(d.agents()):
        if jj != j:
            total += float(np.linalg.norm(X[a, s] - x_star[s]))
    return total
