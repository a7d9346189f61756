"""Stacked iterate, preconditioner and the operators of the monotone inclusion.

The iterate is stored as one flat vector ordered ``(x_hat, z, lam, mu)``.
Everything is applied without forming Kronecker products; the ``dense_*``
helpers exist to validate that on small instances.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from .certify import StepConfig
from .game import GameError, GameSpec, extended_pseudogradient, prox_all

DENSE_LIMIT = 200


@dataclass(frozen=True)
class StateLayout:
    nq: int
    wm: int
    q: int

    @classmethod
    def of(cls, spec: GameSpec) -> "StateLayout":
        d = spec.dims
        return cls(d.est_dim, d.w * d.m, d.q)

    @property
    def size(self) -> int:
        return self.nq + 2 * self.wm + self.q

    @property
    def x_hat(self) -> slice:
        return slice(0, self.nq)

    @property
    def z(self) -> slice:
        return slice(self.nq, self.nq + self.wm)

    @property
    def lam(self) -> slice:
        return slice(self.nq + self.wm, self.nq + self.wm + self.q)

    @property
    def mu(self) -> slice:
        return slice(self.nq + self.wm + self.q, self.size)


class StackedState:
    """View-based wrapper over the flat iterate vector."""

    __slots__ = ("vector", "layout")

    def __init__(self, vector: np.ndarray, layout: StateLayout):
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (layout.size,):
            raise GameError(f"stacked state must have length {layout.size}, got {vector.shape}")
        self.vector = vector
        self.layout = layout

    @classmethod
    def from_parts(cls, spec: GameSpec, x_hat, z=None, lam=None, mu=None) -> "StackedState":
        lay = StateLayout.of(spec)
        v = np.zeros(lay.size)
        v[lay.x_hat] = x_hat
        if z is not None:
            v[lay.z] = z
        if lam is not None:
            v[lay.lam] = lam
        if mu is not None:
            v[lay.mu] = mu
        return cls(v, lay)

    @classmethod
    def zeros(cls, spec: GameSpec) -> "StackedState":
        lay = StateLayout.of(spec)
        return cls(np.zeros(lay.size), lay)

    @property
    def x_hat(self) -> np.ndarray:
        return self.vector[self.layout.x_hat]

    @property
    def z(self) -> np.ndarray:
        return self.vector[self.layout.z]

    @property
    def lam(self) -> np.ndarray:
        return self.vector[self.layout.lam]

    @property
    def mu(self) -> np.ndarray:
        return self.vector[self.layout.mu]

    def copy(self) -> "StackedState":
        return StackedState(self.vector.copy(), self.layout)

    def to_dict(self) -> dict:
        return {"x_hat": self.x_hat.tolist(), "z": self.z.tolist(), "lambda": self.lam.tolist(),
                "mu": self.mu.tolist()}

    def __repr__(self) -> str:
        return f"StackedState(size={self.layout.size})"


def _vec(s) -> np.ndarray:
    return s.vector if isinstance(s, StackedState) else np.asarray(s, dtype=float)


@dataclass(frozen=True)
class Preconditioner:
    """Diagonal of the block preconditioner: inverse step sizes per coordinate."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if np.any(~(w > 0)) or not np.all(np.isfinite(w)):
            raise GameError("preconditioner weights must be finite and positive")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        inv = 1.0 / w
        inv.setflags(write=False)
        object.__setattr__(self, "_steps", inv)

    @classmethod
    def from_steps(cls, spec: GameSpec, steps: StepConfig) -> "Preconditioner":
        steps.check_shapes(spec)
        if np.any(steps.all_steps() <= 0):
            raise GameError("every step size must be strictly positive")
        d = spec.dims
        lay = spec.layout
        rho_copy = np.repeat(steps.rho, d.q)
        tau_own = np.empty(d.q)
        for a, (j, i) in enumerate(d.agents()):
            tau_own[lay.x_slice(j, i)] = steps.tau[a]
        w = np.concatenate([1.0 / rho_copy, np.repeat(1.0 / steps.sigma, d.w), 1.0 / tau_own,
                            np.repeat(1.0 / steps.nu, d.w)])
        return cls(w)

    @property
    def steps(self) -> np.ndarray:
        return self._steps


def psi_apply(psi: Preconditioner, v) -> np.ndarray:
    v = _vec(v)
    if v.shape != psi.weights.shape:
        raise GameError("length mismatch with preconditioner")
    return psi.weights * v


def psi_inverse_apply(psi: Preconditioner, v) -> np.ndarray:
    v = _vec(v)
    if v.shape != psi.weights.shape:
        raise GameError("length mismatch with preconditioner")
    return v / psi.weights


def psi_norm(psi: Preconditioner, v) -> float:
    v = _vec(v)
    return float(np.sqrt(np.dot(psi_apply(psi, v), v)))


# -- Laplacian applications ----------------------------------------------------------

class _Plan:
    """Index data reused by every operator application on one game."""

    def __init__(self, spec: GameSpec):
        d = spec.dims
        lay = spec.layout
        lap = spec.laplacians
        self.state = StateLayout.of(spec)
        self.r_index = lay.r_index
        self.clusters = [(lay.cluster_slice(j), (d.cluster_sizes[j], d.strategy_dims[j]), Lj)
                         for j, Lj in enumerate(lap.per_cluster)]
        self.copies = (d.n, d.q)
        self.block_L = lap.block_diag_L
        self.leaders = lap.leaders
        self.L0 = lap.leader_L0
        self.mw = (d.m, d.w)
        self.Lambda = spec.Lambda
        self.b = spec.coupling.b_stacked


_PLANS: "weakref.WeakKeyDictionary[GameSpec, _Plan]" = weakref.WeakKeyDictionary()


def _plan(spec: GameSpec) -> _Plan:
    plan = _PLANS.get(spec)
    if plan is None:
        plan = _PLANS[spec] = _Plan(spec)
    return plan


def _cluster_lap(plan: _Plan, v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    for cs, shape, Lj in plan.clusters:
        out[cs] = (Lj @ v[cs].reshape(shape)).ravel()
    return out


def _leader_lap(plan: _Plan, v: np.ndarray) -> np.ndarray:
    return (plan.L0 @ v.reshape(plan.mw)).ravel()


def _estimate_lap(plan: _Plan, x_hat: np.ndarray) -> np.ndarray:
    X = x_hat.reshape(plan.copies)
    Y = plan.block_L @ X
    Y[plan.leaders] += plan.L0 @ X[plan.leaders]
    return Y.ravel()


def cluster_laplacian_apply(spec: GameSpec, v: np.ndarray) -> np.ndarray:
    """``diag(L^j ⊗ I_{q_j})`` on a q-vector."""
    return _cluster_lap(_plan(spec), np.asarray(v, dtype=float))


def leader_laplacian_apply(spec: GameSpec, v: np.ndarray) -> np.ndarray:
    """``L⁰ ⊗ I_w`` on a wm-vector."""
    return _leader_lap(_plan(spec), np.asarray(v, dtype=float))


def estimate_laplacian_apply(spec: GameSpec, x_hat: np.ndarray) -> np.ndarray:
    """``(L̂ + L̂⁰) x_hat``: copies diffused over inner graphs, leader copies over the leader graph."""
    return _estimate_lap(_plan(spec), np.asarray(x_hat, dtype=float))


# -- operators ----------------------------------------------------------------------

def _phi(plan: _Plan, v: np.ndarray) -> np.ndarray:
    lay = plan.state
    x_hat, z, lam, mu = v[lay.x_hat], v[lay.z], v[lay.lam], v[lay.mu]
    own = x_hat[plan.r_index]
    out = np.zeros(lay.size)
    # cluster Laplacians are symmetric, so L^T lam = L lam
    out[plan.r_index] = _cluster_lap(plan, lam) + plan.Lambda.T @ mu
    out[lay.z] = _leader_lap(plan, mu)
    out[lay.lam] = -_cluster_lap(plan, own)
    out[lay.mu] = -(plan.Lambda @ own) - _leader_lap(plan, z)
    return out


def apply_Phi(spec: GameSpec, s) -> np.ndarray:
    """Skew-symmetric coupling between estimates, auxiliaries and multipliers."""
    v = _vec(s)
    plan = _plan(spec)
    if v.shape != (plan.state.size,):
        raise GameError(f"stacked state must have length {plan.state.size}")
    return _phi(plan, v)


def apply_A(spec: GameSpec, c: float, s, check: bool = True) -> np.ndarray:
    """Single-valued part of the inclusion: gradients, consensus penalty, b and the skew coupler."""
    v = _vec(s)
    plan = _plan(spec)
    if v.shape != (plan.state.size,):
        raise GameError(f"stacked state must have length {plan.state.size}")
    lay = plan.state
    out = _phi(plan, v)
    x_hat = v[lay.x_hat]
    F = extended_pseudogradient(spec, x_hat, check=check)
    out[lay.x_hat] += c * _estimate_lap(plan, x_hat)
    out[plan.r_index] += F
    out[lay.mu] += plan.b
    return out


def resolvent_B(spec: GameSpec, psi: Preconditioner, s) -> np.ndarray:
    """Prox on own strategies (step rho), projection of mu onto the nonnegative orthant, then sync."""
    v = _vec(s).copy()
    lay = _plan(spec).state
    x_hat = v[lay.x_hat]
    r = spec.layout.r_index
    x_hat[r] = prox_all(spec, x_hat[r], psi.steps[r])
    np.maximum(v[lay.mu], 0.0, out=v[lay.mu])
    spec.layout.synchronize(x_hat, out=x_hat)
    return v


# -- dense debug assemblies ---------------------------------------------------------------

def _guard(spec: GameSpec, limit: int):
    if spec.dims.est_dim > limit:
        raise GameError(f"dense assembly limited to n*q <= {limit}")


def dense_cluster_laplacian(spec: GameSpec) -> np.ndarray:
    d = spec.dims
    out = np.zeros((d.q, d.q))
    for j, Lj in enumerate(spec.laplacians.per_cluster):
        cs = spec.layout.cluster_slice(j)
        out[cs, cs] = np.kron(Lj, np.eye(d.strategy_dims[j]))
    return out


def dense_leader_laplacian(spec: GameSpec) -> np.ndarray:
    return np.kron(spec.laplacians.leader_L0, np.eye(spec.dims.w))


def dense_estimate_laplacian(spec: GameSpec, limit: int = DENSE_LIMIT) -> np.ndarray:
    _guard(spec, limit)
    lap = spec.laplacians
    return np.kron(lap.block_diag_L + lap.expanded_L0, np.eye(spec.dims.q))


def dense_Phi(spec: GameSpec, limit: int = DENSE_LIMIT) -> np.ndarray:
    from .game import dense_selectors

    _guard(spec, limit)
    lay = StateLayout.of(spec)
    R, _ = dense_selectors(spec.layout)
    L = dense_cluster_laplacian(spec)
    L0 = dense_leader_laplacian(spec)
    Lam = spec.Lambda
    P = np.zeros((lay.size, lay.size))
    P[lay.x_hat, lay.lam] = R.T @ L.T
    P[lay.x_hat, lay.mu] = R.T @ Lam.T
    P[lay.z, lay.mu] = L0
    P[lay.lam, lay.x_hat] = -L @ R
    P[lay.mu, lay.x_hat] = -Lam @ R
    P[lay.mu, lay.z] = -L0
    return P


def dense_Psi(psi: Preconditioner) -> np.ndarray:
    return np.diag(psi.weights)


def dense_A(spec: GameSpec, c: float, limit: int = DENSE_LIMIT) -> tuple[np.ndarray, np.ndarray]:
    """``(K, k0)`` with ``A(s) = K s + k0`` for quadratic games (unsynchronized form)."""
    from .game import dense_selectors

    if not spec.payoffs.is_quadratic:
        raise GameError("dense A needs a quadratic payoff model")
    _guard(spec, limit)
    lay = StateLayout.of(spec)
    R, _ = dense_selectors(spec.layout)
    E, e0 = spec.payoffs.affine_extended()
    K = dense_Phi(spec, limit)
    K[lay.x_hat, lay.x_hat] += R.T @ E + c * dense_estimate_laplacian(spec, limit)
    k0 = np.zeros(lay.size)
    k0[lay.x_hat] = R.T @ e0
    k0[lay.mu] = spec.coupling.b_stacked
    return K, k0
