"""Full-information reference solvers.

Agents of one cluster must agree (``x_i^j = y^j`` for all ``i``), so the
references work in consensus coordinates ``y = col(y^j)`` with
``x = P y``, ``P = diag(1_{n_j} ⊗ I_{q_j})``. The reduced map is
``G(y) = P^T F(P y)``, the feasible box of ``y^j`` is the intersection of the
member boxes, and the coupling reads ``sum_j A^j y^j <= b``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .game import GameSpec, full_pseudogradient

log = logging.getLogger(__name__)


class OracleError(RuntimeError):
    pass


@dataclass
class OracleResult:
    x_star: np.ndarray
    mu_star: np.ndarray
    lambda_star: np.ndarray
    residual: float
    method: str
    converged: bool = True
    iterations: int = 0
    lambda_residual: float = math.nan
    complementarity: float = 0.0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "converged": self.converged,
            "iterations": self.iterations,
            "residual": self.residual,
            "lambda_residual": self.lambda_residual,
            "complementarity": self.complementarity,
            "x_star": self.x_star.tolist(),
            "mu_star": self.mu_star.tolist(),
            "lambda_star": self.lambda_star.tolist(),
        }


@dataclass(frozen=True)
class ReducedProblem:
    P: np.ndarray            # q x p consensus embedding
    lower: np.ndarray        # p
    upper: np.ndarray        # p
    A: np.ndarray            # w x p
    b: np.ndarray            # w

    @classmethod
    def of(cls, spec: GameSpec) -> "ReducedProblem":
        d = spec.dims
        lay = spec.layout
        p = sum(d.strategy_dims)
        P = np.zeros((d.q, p))
        lo = np.full(p, -np.inf)
        hi = np.full(p, np.inf)
        col = 0
        A = np.zeros((d.w, p))
        for j, (s, k) in enumerate(zip(d.cluster_sizes, d.strategy_dims)):
            cols = slice(col, col + k)
            for i in range(s):
                P[lay.x_slice(j, i), cols] = np.eye(k)
                box = spec.box(j, i)
                lo[cols] = np.maximum(lo[cols], box.lower)
                hi[cols] = np.minimum(hi[cols], box.upper)
            A[:, cols] = spec.coupling.A[j]
            col += k
        if np.any(lo > hi):
            raise OracleError("boxes of agents in one cluster do not intersect")
        return cls(P, lo, hi, A, spec.coupling.b_total)

    def lift(self, y: np.ndarray) -> np.ndarray:
        return self.P @ y


def _reduced_affine(spec: GameSpec, red: ReducedProblem) -> tuple[np.ndarray, np.ndarray]:
    M, m0 = spec.payoffs.affine_full()
    return red.P.T @ M @ red.P, red.P.T @ m0


def closed_form_ne(spec: GameSpec, tol: float = 1e-9) -> np.ndarray:
    """Unconstrained equilibrium of an affine game by one dense solve.

    Raises if the solution violates a box or the coupling constraint, since
    then the constraints are not slack and the closed form does not apply.
    """
    if not spec.payoffs.is_quadratic:
        raise OracleError("closed form needs a quadratic payoff model")
    red = ReducedProblem.of(spec)
    K, k0 = _reduced_affine(spec, red)
    try:
        if np.linalg.cond(K) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        y = np.linalg.solve(K, -k0)
    except np.linalg.LinAlgError as exc:
        raise OracleError(f"reduced pseudo-gradient matrix is singular: {exc}") from exc
    if np.any(y < red.lower - tol) or np.any(y > red.upper + tol):
        raise OracleError("closed-form point leaves a box: constraints are active")
    if red.A.size and np.any(red.A @ y - red.b > tol):
        raise OracleError("closed-form point violates the coupling constraint")
    return red.lift(y)


def _lipschitz(spec: GameSpec, red: ReducedProblem, seed: int = 0, samples: int = 200) -> float:
    if spec.payoffs.is_quadratic:
        K, _ = _reduced_affine(spec, red)
        w = red.A.shape[0]
        full = np.block([[K, red.A.T], [-red.A, np.zeros((w, w))]])
        return float(np.linalg.norm(full, 2))
    # callback payoffs: empirical quotient with a safety factor
    rng = np.random.default_rng(seed)
    best = 0.0
    p = red.P.shape[1]
    for _ in range(samples):
        y1, y2 = rng.standard_normal(p), rng.standard_normal(p)
        g1 = red.P.T @ full_pseudogradient(spec, red.lift(y1))
        g2 = red.P.T @ full_pseudogradient(spec, red.lift(y2))
        best = max(best, float(np.linalg.norm(g1 - g2) / np.linalg.norm(y1 - y2)))
    log.warning("oracle step uses a sampled Lipschitz estimate")
    return 2.0 * best + float(np.linalg.norm(red.A, 2))


def centralized_vgne(spec: GameSpec, tol: float = 1e-11, max_iters: int = 2_000_000,
                     y0: np.ndarray | None = None) -> OracleResult:
    """Projected extragradient on ``(G(y) + A^T mu, b - A y)`` over boxes x R_+^w."""
    red = ReducedProblem.of(spec)
    w = red.A.shape[0]
    L = _lipschitz(spec, red)
    step = 1.0 / (2.0 * max(L, 1e-12))
    lo, hi = red.lower, red.upper
    if y0 is None:
        y = np.clip(np.zeros(lo.size), lo, hi)
        both = np.isfinite(lo) & np.isfinite(hi)
        y[both] = 0.5 * (lo[both] + hi[both])
    else:
        y = np.clip(np.asarray(y0, dtype=float), lo, hi)
    mu = np.zeros(w)

    def G(yv, mv):
        gy = red.P.T @ full_pseudogradient(spec, red.lift(yv)) + red.A.T @ mv
        return gy, red.b - red.A @ yv

    def natural(yv, mv):
        gy, gm = G(yv, mv)
        ry = yv - np.clip(yv - gy, lo, hi)
        rm = mv - np.maximum(mv - gm, 0.0)
        return float(np.sqrt(ry @ ry + rm @ rm))

    res = natural(y, mu)
    k = 0
    while res > tol and k < max_iters:
        gy, gm = G(y, mu)
        yh = np.clip(y - step * gy, lo, hi)
        mh = np.maximum(mu - step * gm, 0.0)
        gy, gm = G(yh, mh)
        y = np.clip(y - step * gy, lo, hi)
        mu = np.maximum(mu - step * gm, 0.0)
        k += 1
        if k % 50 == 0:
            res = natural(y, mu)
    res = natural(y, mu)
    converged = res <= tol
    if not converged:
        log.warning("oracle budget exhausted with residual %.3e", res)
    x = red.lift(y)
    lam, lam_res = recover_intra_multipliers(spec, x, mu)
    comp = float(abs(mu @ (red.b - red.A @ y))) if w else 0.0
    return OracleResult(x, mu, lam, res, "extragradient", converged, k, lam_res, comp)


def recover_intra_multipliers(spec: GameSpec, x: np.ndarray, mu: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares intra-cluster multipliers from the strategy KKT line.

    Solves ``L lambda = -(F(x) + Lambda^T (1 ⊗ mu) + nu)``, where the normal
    vector ``nu`` carries the reduced normal-cone component and is shared
    equally among the agents whose bound is active.
    """
    d = spec.dims
    lay = spec.layout
    mus = np.tile(mu, d.m) if d.w else np.zeros(0)
    g = full_pseudogradient(spec, x) + (spec.Lambda.T @ mus if d.w else 0.0)
    lam = np.zeros(d.q)
    worst = 0.0
    for j, (s, k) in enumerate(zip(d.cluster_sizes, d.strategy_dims)):
        cs = lay.cluster_slice(j)
        G = g[cs].reshape(s, k)
        X = x[cs].reshape(s, k)
        nu = np.zeros_like(G)
        total = G.sum(axis=0)
        for e in range(k):
            if abs(total[e]) == 0:
                continue
            # total > 0 is balanced by an active lower bound, total < 0 by an upper bound
            bound = np.array([spec.box(j, i).lower[e] if total[e] > 0 else spec.box(j, i).upper[e] for i in range(s)])
            active = np.isclose(X[:, e], bound, rtol=0, atol=1e-9 * max(1.0, np.abs(X[:, e]).max()))
            if active.any():
                nu[active, e] = -total[e] / active.sum()
        rhs = -(G + nu)
        Lj = spec.laplacians.per_cluster[j]
        sol, *_ = np.linalg.lstsq(Lj, rhs, rcond=None)
        lam[cs] = sol.ravel()
        worst = max(worst, float(np.linalg.norm(Lj @ sol - rhs)))
    return lam, worst


@dataclass(frozen=True)
class RelativeErrorTrace:
    k: np.ndarray
    values: np.ndarray
    absolute: bool


def relative_error_trace(trace, reference: OracleResult) -> RelativeErrorTrace:
    """``||x_hat[k] - 1_n ⊗ x*|| / ||1_n ⊗ x*||`` per recorded iterate.

    Falls back to the absolute error (flagged) when the reference is zero.
    """
    if not trace.x_hat_history:
        raise OracleError("trace has no stored iterates; run with keep_iterates=True")
    ks = np.concatenate(([0], np.asarray(trace.columns["k"], dtype=int)))
    if len(ks) != len(trace.x_hat_history):
        raise OracleError("stored iterates do not line up with recorded iterations")
    n = len(trace.x_hat_history[0]) // reference.x_star.size
    ref = np.tile(reference.x_star, n)
    scale = float(np.linalg.norm(ref))
    absolute = scale == 0.0
    errs = np.array([np.linalg.norm(xh - ref) for xh in trace.x_hat_history])
    return RelativeErrorTrace(ks, errs if absolute else errs / scale, absolute)
