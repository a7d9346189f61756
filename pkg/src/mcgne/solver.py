"""The two-phase FBF iteration, in compact and per-agent form.

The compact form works on the flat stacked vector, the agent form loops over
agents and only reads what each agent would receive from its neighbors. Both
read only iteration-``k`` values inside a half step, so they coincide.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .certify import CertificationError, StepConfig, certify
from .game import GameSpec, extended_pseudogradient, prox_all, prox_h
from .operators import (
    Preconditioner,
    StackedState,
    StateLayout,
    apply_A,
    cluster_laplacian_apply,
    estimate_laplacian_apply,
    leader_laplacian_apply,
    psi_norm,
    resolvent_B,
)

log = logging.getLogger(__name__)

REALIZATIONS = ("compact", "agent", "both")
TRACE_COLUMNS = ("k", "fp_residual", "intra_consensus", "est_consensus", "mu_consensus",
                 "constraint_viol", "psi_dist", "mu_neg")


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, block: str):
        super().__init__(f"non-finite values in block {block!r} at iteration {iteration}")
        self.iteration = iteration
        self.block = block


class LockstepError(RuntimeError):
    def __init__(self, iteration: int, gap: float, block: str):
        super().__init__(f"compact and agent-level iterates disagree by {gap:.3e} in block {block!r} "
                         f"at iteration {iteration}")
        self.iteration = iteration
        self.gap = gap
        self.block = block


@dataclass
class SolverOptions:
    max_iters: int = 200_000
    tol_fixed_point: float = 1e-8
    tol_consensus: float = 1e-6
    record_every: int = 1
    realization: str = "compact"
    reference: np.ndarray | None = None
    lockstep_tol: float = 1e-6
    keep_iterates: bool = False
    check_certificate: bool = True

    def __post_init__(self):
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be at least 1")
        if not (self.tol_fixed_point > 0 and self.tol_consensus > 0 and self.lockstep_tol > 0):
            raise ValueError("tolerances must be positive")
        if int(self.record_every) < 1:
            raise ValueError("record_every must be at least 1")
        if self.realization not in REALIZATIONS:
            raise ValueError(f"realization must be one of {REALIZATIONS}")
        self.max_iters = int(self.max_iters)
        self.record_every = int(self.record_every)


@dataclass
class RunTrace:
    columns: dict[str, list] = field(default_factory=lambda: {c: [] for c in TRACE_COLUMNS})
    lockstep_gap: list[float] = field(default_factory=list)
    x_hat_history: list[np.ndarray] = field(default_factory=list)
    initial_psi_dist: float = math.nan
    final: StackedState | None = None
    iterations: int = 0
    converged: bool = False
    status: str = "running"

    def __len__(self) -> int:
        return len(self.columns["k"])

    def column(self, name: str) -> np.ndarray:
        if name == "lockstep_gap":
            return np.array(self.lockstep_gap)
        return np.array(self.columns[name], dtype=float)

    def rows(self):
        names = list(TRACE_COLUMNS) + (["lockstep_gap"] if self.lockstep_gap else [])
        for r in range(len(self)):
            row = [self.columns[c][r] for c in TRACE_COLUMNS]
            if self.lockstep_gap:
                row.append(self.lockstep_gap[r])
            yield dict(zip(names, row))


# -- diagnostics ---------------------------------------------------------------------

def coupling_value(spec: GameSpec, x_hat: np.ndarray) -> np.ndarray:
    """``sum_j A^j x_1^j - b`` read from the leaders' own strategies."""
    own = x_hat[spec.layout.r_index]
    d = spec.dims
    return (spec.Lambda @ own).reshape(d.m, d.w).sum(axis=0) - spec.coupling.b_total


def diagnostics(spec: GameSpec, s: StackedState) -> dict:
    x_hat = s.x_hat
    own = x_hat[spec.layout.r_index]
    return {
        "intra_consensus": float(np.linalg.norm(cluster_laplacian_apply(spec, own))),
        "est_consensus": float(np.linalg.norm(estimate_laplacian_apply(spec, x_hat))),
        "mu_consensus": float(np.linalg.norm(leader_laplacian_apply(spec, s.mu))) if s.mu.size else 0.0,
        "constraint_viol": float(np.linalg.norm(np.maximum(coupling_value(spec, x_hat), 0.0))),
        "mu_neg": float(max(0.0, -s.mu.min())) if s.mu.size else 0.0,
    }


@dataclass(frozen=True)
class KKTResidual:
    r1: float
    r2: float
    r3: float

    def max(self) -> float:
        return max(self.r1, self.r2, self.r3)


def kkt_residual(spec: GameSpec, s: StackedState) -> KKTResidual:
    """Natural-map residuals of the partial-information KKT system.

    ``r1``: strategy line with unit prox step; ``r2``: complementarity of the
    cluster-averaged multiplier against the aggregated constraint; ``r3``:
    intra-cluster consensus ``||L R x_hat||``.
    """
    d = spec.dims
    x_hat = s.x_hat
    own = x_hat[spec.layout.r_index]
    g = extended_pseudogradient(spec, x_hat) + cluster_laplacian_apply(spec, s.lam) + spec.Lambda.T @ s.mu
    r1 = float(np.linalg.norm(own - prox_all(spec, own - g, np.ones(d.q))))
    if d.w:
        mu_bar = s.mu.reshape(d.m, d.w).mean(axis=0)
        r2 = float(np.linalg.norm(mu_bar - np.maximum(0.0, mu_bar + coupling_value(spec, x_hat))))
    else:
        r2 = 0.0
    r3 = float(np.linalg.norm(cluster_laplacian_apply(spec, own)))
    return KKTResidual(r1, r2, r3)


def _check_finite(s: np.ndarray, lay: StateLayout, k: int):
    if np.all(np.isfinite(s)):
        return
    for name in ("x_hat", "z", "lam", "mu"):
        if not np.all(np.isfinite(s[getattr(lay, name)])):
            raise DivergenceError(k, name)
    raise DivergenceError(k, "unknown")


def default_initial_state(spec: GameSpec) -> StackedState:
    """Box midpoints (0 on unbounded sides) copied to every agent, zero duals."""
    x0 = np.concatenate([b.midpoint() for b in spec.boxes])
    return StackedState.from_parts(spec, spec.layout.consensus(x0))


# -- compact realization ---------------------------------------------------------------

def fbf_step(spec: GameSpec, steps: StepConfig, s, psi: Preconditioner | None = None,
             k: int = 0, check: bool = True) -> tuple[StackedState, StackedState]:
    """One forward-backward-forward step; the gain ``c`` is taken from ``steps``.

    ``check=False`` skips the synchronization test on the input (the driver
    only feeds states it synchronized itself).
    """
    psi = psi or Preconditioner.from_steps(spec, steps)
    lay = StateLayout.of(spec)
    v = s.vector if isinstance(s, StackedState) else np.asarray(s, dtype=float)
    inv = psi.steps
    with np.errstate(all="ignore"):
        As = apply_A(spec, steps.c, v, check=check)
        half = resolvent_B(spec, psi, v - inv * As)
        _check_finite(half, lay, k)
        Ah = apply_A(spec, steps.c, half, check=False)
        nxt = half + inv * (As - Ah)
        x_hat = nxt[lay.x_hat]
        spec.layout.synchronize(x_hat, out=x_hat)
    _check_finite(nxt, lay, k)
    return StackedState(half, lay), StackedState(nxt, lay)


# -- agent-level realization -----------------------------------------------------------

class _AgentView:
    """Per-agent unpacking of a stacked state (copies as an (n, q) array)."""

    def __init__(self, spec: GameSpec, s: StackedState):
        d = spec.dims
        self.X = s.x_hat.reshape(d.n, d.q)
        self.lam = s.lam
        self.z = s.z.reshape(d.m, d.w)
        self.mu = s.mu.reshape(d.m, d.w)
        self.v = extended_pseudogradient(spec, s.x_hat)


class _Net:
    """Neighbor lists and bookkeeping shared by both agent half steps."""

    def __init__(self, spec: GameSpec, steps: StepConfig):
        self.spec = spec
        d = spec.dims
        lay = spec.layout
        self.c = steps.c
        self.steps = steps
        self.leaders = spec.laplacians.leaders
        self.W_leader = spec.topology.leader.weights
        self.inner = [g.weights for g in spec.topology.inner]
        # complement of the own-cluster block inside a copy
        self.outside = []
        for j in range(d.m):
            mask = np.ones(d.q, dtype=bool)
            mask[lay.cluster_slice(j)] = False
            self.outside.append(np.nonzero(mask)[0])
        self.agents = d.agents()

    def inner_neighbors(self, j: int, i: int):
        W = self.inner[j]
        return [(xi, W[i, xi]) for xi in np.nonzero(W[i])[0]]

    def leader_neighbors(self, j: int, i: int):
        # w^{j,l}_{i,1} is zero for non-leaders
        if i != 0:
            return []
        W = self.W_leader
        return [(l, W[j, l]) for l in np.nonzero(W[j])[0]]


def _own(spec: GameSpec, view: _AgentView, j: int, i: int) -> np.ndarray:
    a = spec.layout.agent_index(j, i)
    return view.X[a, spec.layout.x_slice(j, i)]


def _lam(spec: GameSpec, view: _AgentView, j: int, i: int) -> np.ndarray:
    return view.lam[spec.layout.x_slice(j, i)]


def _pack(spec: GameSpec, X: np.ndarray, lam: np.ndarray, z: np.ndarray, mu: np.ndarray) -> StackedState:
    x_hat = X.ravel()
    spec.layout.synchronize(x_hat, out=x_hat)
    return StackedState.from_parts(spec, x_hat, z.ravel(), lam, mu.ravel())


def agent_half_step_1(spec: GameSpec, steps: StepConfig, s: StackedState) -> StackedState:
    """First (forward-backward) procedure, written per agent."""
    net = _Net(spec, steps)
    lay = spec.layout
    cur = _AgentView(spec, s)
    c = steps.c
    X_new = cur.X.copy()
    lam_new = cur.lam.copy()
    z_new = cur.z.copy()
    mu_new = cur.mu.copy()
    for a, (j, i) in enumerate(net.agents):
        rho, tau = steps.rho[a], steps.tau[a]
        own_sl = lay.x_slice(j, i)
        lead_own = lay.x_slice(j, 0)
        out = net.outside[j]
        x_i = _own(spec, cur, j, i)

        g = cur.v[own_sl].copy()
        if i == 0:
            g += spec.coupling.A[j].T @ cur.mu[j]
        for l, w in net.leader_neighbors(j, i):
            # leader l's estimate of leader j's strategy
            g += c * w * (x_i - cur.X[net.leaders[l], lead_own])
        for xi, w in net.inner_neighbors(j, i):
            g += w * (_lam(spec, cur, j, i) - _lam(spec, cur, j, xi))
        X_new[a, own_sl] = prox_h(spec, j, i, x_i - rho * g, rho)

        est = cur.X[a, out].copy()
        for l, w in net.leader_neighbors(j, i):
            est -= c * rho * w * (cur.X[net.leaders[j], out] - cur.X[net.leaders[l], out])
        for xi, w in net.inner_neighbors(j, i):
            est -= c * rho * w * (cur.X[a, out] - cur.X[lay.agent_index(j, xi), out])
        X_new[a, out] = est

        dl = np.zeros_like(x_i)
        for xi, w in net.inner_neighbors(j, i):
            dl += w * (x_i - _own(spec, cur, j, xi))
        lam_new[own_sl] = _lam(spec, cur, j, i) + tau * dl

        if i == 0 and spec.dims.w:
            sigma, nu = steps.sigma[j], steps.nu[j]
            dz = np.zeros(spec.dims.w)
            dmu = np.zeros(spec.dims.w)
            for l, w in net.leader_neighbors(j, 0):
                dz += w * (cur.mu[j] - cur.mu[l])
                dmu += w * (cur.z[j] - cur.z[l])
            z_new[j] = cur.z[j] - sigma * dz
            mu_new[j] = np.maximum(0.0, cur.mu[j] + nu * (dmu + spec.coupling.A[j] @ x_i - spec.coupling.b[j]))
    return _pack(spec, X_new, lam_new, z_new, mu_new)


def agent_half_step_2(spec: GameSpec, steps: StepConfig, s: StackedState, s_half: StackedState) -> StackedState:
    """Second (correction) procedure using ``[k - k']`` differences; mu is not projected."""
    net = _Net(spec, steps)
    lay = spec.layout
    old = _AgentView(spec, s)
    mid = _AgentView(spec, s_half)
    c = steps.c
    X_new = mid.X.copy()
    lam_new = mid.lam.copy()
    z_new = mid.z.copy()
    mu_new = mid.mu.copy()

    def diff(fn):
        return fn(old) - fn(mid)

    for a, (j, i) in enumerate(net.agents):
        rho, tau = steps.rho[a], steps.tau[a]
        own_sl = lay.x_slice(j, i)
        lead_own = lay.x_slice(j, 0)
        out = net.outside[j]
        lead_j = net.leaders[j]

        corr = diff(lambda V: V.v[own_sl])
        for xi, w in net.inner_neighbors(j, i):
            corr += w * diff(lambda V: _lam(spec, V, j, i) - _lam(spec, V, j, xi))
        if i == 0:
            corr += spec.coupling.A[j].T @ diff(lambda V: V.mu[j])
        for l, w in net.leader_neighbors(j, i):
            corr += c * w * diff(lambda V: _own(spec, V, j, 0) - V.X[net.leaders[l], lead_own])
        X_new[a, own_sl] = _own(spec, mid, j, i) + rho * corr

        est = np.zeros(out.size)
        for xi, w in net.inner_neighbors(j, i):
            b = lay.agent_index(j, xi)
            est += w * diff(lambda V: V.X[a, out] - V.X[b, out])
        for l, w in net.leader_neighbors(j, i):
            est += w * diff(lambda V: V.X[lead_j, out] - V.X[net.leaders[l], out])
        X_new[a, out] = mid.X[a, out] + c * rho * est

        dl = np.zeros(own_sl.stop - own_sl.start)
        for xi, w in net.inner_neighbors(j, i):
            dl += w * diff(lambda V: _own(spec, V, j, i) - _own(spec, V, j, xi))
        lam_new[own_sl] = _lam(spec, mid, j, i) - tau * dl

        if i == 0 and spec.dims.w:
            sigma, nu = steps.sigma[j], steps.nu[j]
            dz = np.zeros(spec.dims.w)
            dmu = np.zeros(spec.dims.w)
            for l, w in net.leader_neighbors(j, 0):
                dz += w * diff(lambda V: V.mu[j] - V.mu[l])
                dmu += w * diff(lambda V: V.z[j] - V.z[l])
            z_new[j] = mid.z[j] + sigma * dz
            # correction of the forward term +A x_1 enters with the opposite sign
            mu_new[j] = mid.mu[j] - nu * (dmu + spec.coupling.A[j] @ diff(lambda V: _own(spec, V, j, 0)))
    return _pack(spec, X_new, lam_new, z_new, mu_new)


def agent_step(spec: GameSpec, steps: StepConfig, s: StackedState, k: int = 0) -> tuple[StackedState, StackedState]:
    lay = StateLayout.of(spec)
    with np.errstate(all="ignore"):
        half = agent_half_step_1(spec, steps, s)
        _check_finite(half.vector, lay, k)
        nxt = agent_half_step_2(spec, steps, s, half)
    _check_finite(nxt.vector, lay, k)
    return half, nxt


# -- driver -------------------------------------------------------------------------

def _worst_block(lay: StateLayout, diff: np.ndarray) -> str:
    return max(("x_hat", "z", "lam", "mu"),
               key=lambda b: np.max(np.abs(diff[getattr(lay, b)]), initial=0.0))


def run(spec: GameSpec, steps: StepConfig, options: SolverOptions | None = None,
        s0: StackedState | None = None) -> RunTrace:
    """Iterate until the fixed-point and consensus tolerances hold or ``max_iters`` is hit."""
    options = options or SolverOptions()
    steps.check_shapes(spec)
    psi = Preconditioner.from_steps(spec, steps)
    lay = StateLayout.of(spec)

    if options.check_certificate:
        try:
            cert = certify(spec, steps)
            if not cert.ok:
                log.warning("parameters are not certified (c_ok=%s, steps_ok=%s); running anyway",
                            cert.c_ok, cert.steps_ok)
        except CertificationError as exc:
            log.warning("certification skipped: %s", exc)

    s = default_initial_state(spec) if s0 is None else s0.copy()
    if spec.layout.sync_defect(s.x_hat) > 0:
        log.warning("initial estimates were not synchronized; synchronizing")
        spec.layout.synchronize(s.x_hat, out=s.x_hat)

    ref = None if options.reference is None else np.asarray(
        options.reference.vector if isinstance(options.reference, StackedState) else options.reference, dtype=float)
    trace = RunTrace()
    if ref is not None:
        trace.initial_psi_dist = psi_norm(psi, s.vector - ref)
    if options.keep_iterates:
        trace.x_hat_history.append(s.x_hat.copy())
    s_agent = s.copy() if options.realization == "both" else None

    for k in range(1, options.max_iters + 1):
        if options.realization == "agent":
            _, nxt = agent_step(spec, steps, s, k)
        else:
            _, nxt = fbf_step(spec, steps, s, psi, k, check=False)
        gap = None
        if s_agent is not None:
            _, s_agent = agent_step(spec, steps, s_agent, k)
            d = nxt.vector - s_agent.vector
            gap = float(np.max(np.abs(d)))
            if not gap <= options.lockstep_tol:
                raise LockstepError(k, gap, _worst_block(lay, d))

        fp = float(np.max(np.abs(nxt.vector - s.vector)))
        s = nxt
        diag = None
        done = False
        if fp <= options.tol_fixed_point:
            diag = diagnostics(spec, s)
            done = max(diag["intra_consensus"], diag["est_consensus"]) <= options.tol_consensus
        last = done or k == options.max_iters
        if k % options.record_every == 0 or last:
            diag = diag or diagnostics(spec, s)
            cols = trace.columns
            cols["k"].append(k)
            cols["fp_residual"].append(fp)
            for name in ("intra_consensus", "est_consensus", "mu_consensus", "constraint_viol", "mu_neg"):
                cols[name].append(diag[name])
            cols["psi_dist"].append(psi_norm(psi, s.vector - ref) if ref is not None else math.nan)
            if gap is not None:
                trace.lockstep_gap.append(gap)
            if options.keep_iterates:
                trace.x_hat_history.append(s.x_hat.copy())
        if done:
            trace.converged = True
            break

    trace.iterations = k
    trace.final = s
    trace.status = "converged" if trace.converged else "max_iters"
    return trace
