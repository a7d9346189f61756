"""Monotonicity/Lipschitz constants, the consensus-gain threshold and the
step-size gate.

All the bounds here are sufficient conditions. A rejected configuration may
still converge in practice; an accepted one is guaranteed to.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .game import GameSpec, full_pseudogradient
from .graph import (
    second_smallest_eigenvalue,
    smallest_positive_eigenvalue,
    spectral_max,
)

log = logging.getLogger(__name__)


class CertificationError(ValueError):
    pass


@dataclass
class StepConfig:
    """Per-agent (rho, tau) and per-cluster (sigma, nu) steps plus the consensus gain ``c``."""

    rho: np.ndarray
    tau: np.ndarray
    sigma: np.ndarray
    nu: np.ndarray
    c: float

    def __post_init__(self):
        self.rho = np.array(self.rho, dtype=float).ravel()
        self.tau = np.array(self.tau, dtype=float).ravel()
        self.sigma = np.array(self.sigma, dtype=float).ravel()
        self.nu = np.array(self.nu, dtype=float).ravel()
        self.c = float(self.c)

    @classmethod
    def broadcast(cls, spec_or_dims, rho, tau, sigma, nu, c) -> "StepConfig":
        """Scalars are repeated for every agent / cluster; sequences are taken as-is."""
        dims = getattr(spec_or_dims, "dims", spec_or_dims)

        def expand(v, k, name):
            arr = np.broadcast_to(np.asarray(v, dtype=float), (k,)) if np.ndim(v) == 0 else np.asarray(v, dtype=float)
            if arr.shape != (k,):
                raise CertificationError(f"{name} must be a scalar or have length {k}")
            return arr.copy()

        return cls(expand(rho, dims.n, "rho"), expand(tau, dims.n, "tau"),
                   expand(sigma, dims.m, "sigma"), expand(nu, dims.m, "nu"), c)

    @classmethod
    def uniform(cls, spec_or_dims, step: float, c: float) -> "StepConfig":
        return cls.broadcast(spec_or_dims, step, step, step, step, c)

    def all_steps(self) -> np.ndarray:
        return np.concatenate([self.rho, self.tau, self.sigma, self.nu])

    @property
    def max_step(self) -> float:
        return float(self.all_steps().max())

    def check_shapes(self, spec: GameSpec) -> None:
        d = spec.dims
        if self.rho.shape != (d.n,) or self.tau.shape != (d.n,):
            raise CertificationError(f"rho and tau need {d.n} entries")
        if self.sigma.shape != (d.m,) or self.nu.shape != (d.m,):
            raise CertificationError(f"sigma and nu need {d.m} entries")

    def to_dict(self) -> dict:
        return {"rho": self.rho.tolist(), "tau": self.tau.tolist(), "sigma": self.sigma.tolist(),
                "nu": self.nu.tolist(), "c": self.c}


@dataclass(frozen=True)
class GameConstants:
    eta: float
    kappa0: float
    kappa: float
    mode: str = "exact"

    @property
    def certified(self) -> bool:
        return self.mode == "exact"


def compute_constants(spec: GameSpec, mode: str = "exact", samples: int = 1000, seed: int = 0) -> GameConstants:
    """Strong-monotonicity modulus and Lipschitz constants of the pseudo-gradients.

    ``exact`` reads them off the affine maps of a quadratic game. ``sampled``
    takes empirical extremes over seeded random pairs; those are lower bounds
    on the Lipschitz constants (upper bound on eta) and are flagged as such.
    """
    if mode == "exact":
        pay = spec.payoffs
        if not pay.is_quadratic:
            raise CertificationError("exact constants need a quadratic payoff model")
        M, _ = pay.affine_full()
        E, _ = pay.affine_extended()
        eta = float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())
        return GameConstants(eta, float(np.linalg.norm(M, 2)), float(np.linalg.norm(E, 2)), "exact")
    if mode != "sampled":
        raise CertificationError(f"unknown mode {mode!r}")

    rng = np.random.default_rng(seed)
    d = spec.dims
    eta, k0, k = math.inf, 0.0, 0.0
    for _ in range(samples):
        x, y = rng.standard_normal(d.q), rng.standard_normal(d.q)
        dF = full_pseudogradient(spec, x) - full_pseudogradient(spec, y)
        dx = x - y
        nx = float(dx @ dx)
        eta = min(eta, float(dF @ dx) / nx)
        k0 = max(k0, float(np.linalg.norm(dF)) / math.sqrt(nx))
        xh, yh = rng.standard_normal((d.n, d.q)), rng.standard_normal((d.n, d.q))
        dFe = spec.payoffs.extended(xh) - spec.payoffs.extended(yh)
        k = max(k, float(np.linalg.norm(dFe) / np.linalg.norm(xh - yh)))
    log.warning("sampled game constants are empirical estimates, not certified bounds")
    return GameConstants(max(eta, 0.0), k0, k, "sampled")


def c_min(constants: GameConstants, connectivity: float) -> float:
    """Smallest consensus gain for which the extended operator is restricted monotone."""
    eta, k0, k = constants.eta, constants.kappa0, constants.kappa
    if not eta > 0:
        raise CertificationError("gain threshold undefined: eta must be positive")
    if not connectivity > 0:
        raise CertificationError("gain threshold undefined: connectivity must be positive")
    return ((k0 + k) ** 2 + 4 * eta * k) / (4 * eta * connectivity)


def monotone_matrix(constants: GameConstants, c: float, connectivity: float, n: int) -> tuple[np.ndarray, float]:
    """2x2 matrix whose positive semidefiniteness gives restricted monotonicity."""
    off = -(constants.kappa + constants.kappa0) / (2 * math.sqrt(n))
    M = np.array([[constants.eta / n, off], [off, c * connectivity - constants.kappa]])
    return M, float(np.linalg.eigvalsh(M)[0])


def lipschitz_parts(constants: GameConstants, c: float, s_max_L: float, s_max_L0: float,
                    delta_A: float) -> tuple[float, float]:
    # both Laplacian terms scaled by c (the larger of the two readings)
    ell1 = constants.kappa + c * (s_max_L + s_max_L0)
    ell2 = 2 * s_max_L + 2 * s_max_L0 + 2 * delta_A
    return ell1, ell2


def lipschitz_bound(constants: GameConstants, c: float, s_max_L: float, s_max_L0: float, delta_A: float) -> float:
    ell1, ell2 = lipschitz_parts(constants, c, s_max_L, s_max_L0, delta_A)
    return ell1 + ell2


@dataclass(frozen=True)
class StepVerdict:
    ok: bool
    max_step: float
    limit: float
    margin: float
    message: str = ""

    def __bool__(self) -> bool:
        return self.ok


def validate_steps(steps: StepConfig, ell_A: float) -> StepVerdict:
    """All steps positive and the largest one strictly below ``1 / ell_A``."""
    if not ell_A > 0:
        raise CertificationError("Lipschitz bound must be positive")
    limit = 1.0 / ell_A
    all_steps = steps.all_steps()
    mx = float(all_steps.max()) if all_steps.size else 0.0
    if all_steps.size and float(all_steps.min()) <= 0:
        return StepVerdict(False, mx, limit, limit - mx, "every step size must be strictly positive")
    if not steps.c > 0:
        return StepVerdict(False, mx, limit, limit - mx, "consensus gain must be strictly positive")
    ok = mx < limit
    msg = "" if ok else f"largest step {mx:.6g} is not below 1/ell_A = {limit:.6g}"
    return StepVerdict(ok, mx, limit, limit - mx, msg)


@dataclass
class Certificate:
    constants: GameConstants
    s2_combined: float
    s2_literal_L: float
    s2_literal_L0: float
    s_max_L: float
    s_max_L0: float
    delta_A: float
    connectivity_rule: str
    connectivity: float
    c: float
    c_min: float
    ell_A1: float
    ell_A2: float
    ell_A: float
    M: np.ndarray
    s_min_M: float
    c_ok: bool
    steps_ok: bool
    step_verdict: StepVerdict
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.c_ok and self.steps_ok

    def to_dict(self) -> dict:
        k = self.constants
        return {
            "constants": {"eta": k.eta, "kappa0": k.kappa0, "kappa": k.kappa, "mode": k.mode,
                          "certified": k.certified},
            "s2_combined": self.s2_combined,
            "s2_literal_L": self.s2_literal_L,
            "s2_literal_L0": self.s2_literal_L0,
            "s_max_L": self.s_max_L,
            "s_max_L0": self.s_max_L0,
            "delta_A": self.delta_A,
            "connectivity_rule": self.connectivity_rule,
            "connectivity": self.connectivity,
            "c": self.c,
            "c_min": self.c_min,
            "ell_A1": self.ell_A1,
            "ell_A2": self.ell_A2,
            "ell_A": self.ell_A,
            "step_limit": self.step_verdict.limit,
            "max_step": self.step_verdict.max_step,
            "step_margin": self.step_verdict.margin,
            "M": self.M.tolist(),
            "s_min_M": self.s_min_M,
            "c_ok": self.c_ok,
            "steps_ok": self.steps_ok,
            "notes": list(self.notes),
        }


def certify(spec: GameSpec, steps: StepConfig, mode: str = "exact", connectivity: str = "combined",
            samples: int = 1000, seed: int = 0, constants: GameConstants | None = None) -> Certificate:
    """Compute every constant of the convergence certificate for ``spec`` and ``steps``.

    ``connectivity`` is ``"combined"`` (smallest positive eigenvalue of
    ``L + L̂⁰``, the default) or ``"literal"`` (``s_2(L) + s_2(L⁰)``).
    """
    steps.check_shapes(spec)
    if constants is None:
        constants = compute_constants(spec, mode, samples, seed)
    lap = spec.laplacians
    s2c = smallest_positive_eigenvalue(lap.combined)
    s2L = second_smallest_eigenvalue(lap.block_diag_L)
    s2L0 = second_smallest_eigenvalue(lap.leader_L0)
    smaxL = spectral_max(lap.block_diag_L)
    smaxL0 = spectral_max(lap.leader_L0)
    delta = spec.coupling.delta
    notes = ["ell_A1 uses kappa + c*(s_max(L) + s_max(L0)); the alternative reading without c on "
             "the leader term gives a smaller value"]
    if connectivity == "combined":
        conn = s2c
    elif connectivity == "literal":
        conn = s2L + s2L0
        notes.append("literal connectivity s2(L)+s2(L0) is not a valid restricted-monotonicity constant "
                     "when L has several zero eigenvalues")
    else:
        raise CertificationError(f"unknown connectivity rule {connectivity!r}")

    try:
        cmin = c_min(constants, conn)
    except CertificationError as exc:
        cmin = math.inf
        notes.append(str(exc))
    M, smin = monotone_matrix(constants, steps.c, conn, spec.dims.n)
    ell1, ell2 = lipschitz_parts(constants, steps.c, smaxL, smaxL0, delta)
    ell = ell1 + ell2
    verdict = validate_steps(steps, ell) if ell > 0 else StepVerdict(False, steps.max_step, math.inf, math.inf,
                                                                      "Lipschitz bound is zero")
    if not constants.certified:
        notes.append("constants are sampled estimates; verdicts are advisory")
    return Certificate(constants, s2c, s2L, s2L0, smaxL, smaxL0, delta, connectivity, conn, steps.c, cmin,
                       ell1, ell2, ell, M, smin, bool(steps.c >= cmin), bool(verdict.ok), verdict, notes)
