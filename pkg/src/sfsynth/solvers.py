"""Single-frequency driving-signal solvers.

* :func:`solve_pm` -- closed-form regularized pressure matching.
* :func:`solve_combined_admm` -- the blend of pressure and amplitude matching,

  .. math::

     J(d) = (1-\\gamma)\\|Gd - u\\|^2 + \\gamma\\||Gd| - |u|\\|^2 + \\beta\\|d\\|^2,

  solved by ADMM on the splitting ``G d = a * exp(j theta)``. ``gamma = 1``
  is plain amplitude matching, ``gamma = 0`` reduces to pressure matching.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.linalg as splin

from .acoustics import (TransferMatrix, build_transfer_matrix,
                        desired_pressure)

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class IllConditionedError(SolverError):
    """The regularized normal equations cannot be solved reliably."""


class DivergenceError(SolverError):
    def __init__(self, message, iteration=None, frequency_hz=None):
        super().__init__(message)
        self.iteration = iteration
        self.frequency_hz = frequency_hz


# ------------------------------------------------------------------- config
def gamma_schedule(omega, omega_T, sigma):
    """Sigmoid blend weight ``1 / (1 + exp(-sigma / (2 pi) * (omega - omega_T)))``.

    Angular frequencies in rad/s. Works on scalars and arrays.
    """
    if np.any(np.asarray(sigma) < 0):
        raise ValueError("sigma must be non-negative")
    x = -(sigma / (2 * np.pi)) * (np.asarray(omega, dtype=float) - omega_T)
    # logistic via exp of a non-positive argument only, overflow free
    out = np.where(x >= 0, np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))), 1 / (1 + np.exp(-np.abs(x))))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class FixedGamma:
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    def at(self, frequency_hz):
        return float(self.value)


@dataclass(frozen=True)
class SigmoidGamma:
    """Sigmoid schedule; ``omega_T`` in rad/s, ``sigma`` dimensionless."""

    omega_T: float
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    @classmethod
    def from_hz(cls, transition_hz, sigma):
        return cls(2 * np.pi * transition_hz, sigma)

    def at(self, frequency_hz):
        return gamma_schedule(2 * np.pi * frequency_hz, self.omega_T, self.sigma)


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    ``beta=None`` selects the per-frequency default
    ``beta_scale * ||G^H G||_2**2`` (spectral norm).
    """

    beta: float | None = None
    rho: float = 1.0
    gamma_mode: FixedGamma | SigmoidGamma = field(default_factory=lambda: SigmoidGamma.from_hz(2000.0, 0.01))
    max_iters: int = 200
    tol_primal: float = 1e-6
    tol_change: float = 1e-8
    beta_scale: float = 1e-3

    def __post_init__(self):
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.tol_primal > 0 and self.tol_change > 0):
            raise ValueError("tolerances must be > 0")

    def gamma_at(self, frequency_hz) -> float:
        return self.gamma_mode.at(frequency_hz)

    def beta_for(self, G) -> float:
        if self.beta is not None:
            return float(self.beta)
        return default_beta(G, self.beta_scale)


def default_beta(G, scale=1e-3) -> float:
    """``scale * ||G^H G||_2**2`` with the spectral norm."""
    gram = G.gram if isinstance(G, TransferMatrix) else (np.asarray(G).conj().T @ np.asarray(G))
    return float(scale * np.linalg.norm(gram, 2) ** 2)


# ------------------------------------------------------------------ results
@dataclass
class SolveDiagnostics:
    iterations: int = 0
    primal_residual_history: list = field(default_factory=list)
    cost_history: list = field(default_factory=list)
    converged: bool = True
    reason: str = "closed_form"
    gamma: float | None = None
    beta: float | None = None

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "reason": self.reason,
            "gamma": self.gamma,
            "beta": self.beta,
            "final_primal_residual": self.primal_residual_history[-1] if self.primal_residual_history else None,
            "final_cost": self.cost_history[-1] if self.cost_history else None,
        }


@dataclass
class DrivingSignal:
    values: np.ndarray
    frequency_hz: float
    diagnostics: SolveDiagnostics = field(default_factory=SolveDiagnostics)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if not np.all(np.isfinite(self.values)):
            raise DivergenceError("driving signal has non-finite entries", frequency_hz=self.frequency_hz)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass
class AdmmState:
    """ADMM iterate: amplitude ``a``, phase ``theta``, driving signal ``d``, multiplier ``lam``."""

    a: np.ndarray
    theta: np.ndarray
    d: np.ndarray
    lam: np.ndarray

    def copy(self):
        return AdmmState(self.a.copy(), self.theta.copy(), self.d.copy(), self.lam.copy())


# ----------------------------------------------------------------- helpers
def _entries(G):
    return G.entries if isinstance(G, TransferMatrix) else np.asarray(G, dtype=complex)


def _gram(G):
    if isinstance(G, TransferMatrix):
        return G.gram
    g = np.asarray(G)
    gram = g.conj().T @ g
    return 0.5 * (gram + gram.conj().T)


def _values(u):
    return np.asarray(getattr(u, "values", u), dtype=complex)


def _frequency(*objs):
    for o in objs:
        f = getattr(o, "frequency_hz", None)
        if f is not None:
            return float(f)
    return float("nan")


def safe_angle(z):
    """Element-wise argument with ``arg(0) = 0``."""
    z = np.asarray(z)
    return np.where(z == 0, 0.0, np.angle(z))


def _factor(gram, shift, allow_singular=False):
    """Cholesky factor of ``gram + shift I``."""
    m = gram + shift * np.eye(gram.shape[0])
    if shift == 0 and not allow_singular:
        cond = np.linalg.cond(m)
        if not np.isfinite(cond) or cond > 1e12:
            raise IllConditionedError(
                f"G^H G is singular (condition number {cond:.3g}); use beta > 0"
            )
    try:
        return splin.cho_factor(m, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedError("G^H G + beta I is not positive definite; use beta > 0") from exc


# ------------------------------------------------------------------ solvers
def solve_pm(G, u_des, beta) -> DrivingSignal:
    """Regularized pressure matching, ``d = (G^H G + beta I)^{-1} G^H u``.

    Raises
    ------
    IllConditionedError
        ``beta == 0`` and ``G^H G`` is singular.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    g = _entries(G)
    u = _values(u_des)
    if g.shape[0] != u.shape[0]:
        raise ValueError(f"G has {g.shape[0]} rows but u_des has {u.shape[0]} entries")
    factor = _factor(_gram(G), float(beta))
    d = splin.cho_solve(factor, g.conj().T @ u)
    diag = SolveDiagnostics(beta=float(beta), gamma=0.0)
    return DrivingSignal(d, _frequency(G, u_des), diag)


def cost_J(G, d, u_des, gamma, beta) -> float:
    """Blended pressure/amplitude matching cost with Tikhonov term."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    p = _entries(G) @ _values(d)
    u = _values(u_des)
    dv = _values(d)
    pm = np.sum(np.abs(p - u) ** 2)
    am = np.sum((np.abs(p) - np.abs(u)) ** 2)
    return float((1 - gamma) * pm + gamma * am + beta * np.real(np.vdot(dv, dv)))


def optimal_multiplier(G, d, u_des, gamma):
    """Multiplier satisfying the first-order conditions of the splitting at ``z = G d``.

    ``lam = 2(1-gamma)(z - u) + 2 gamma (|z| - |u|) exp(j arg z)``; with
    ``gamma = 0`` and the pressure-matching ``d`` this is an exact fixed point.
    """
    z = _entries(G) @ _values(d)
    u = _values(u_des)
    return 2 * (1 - gamma) * (z - u) + 2 * gamma * (np.abs(z) - np.abs(u)) * np.exp(1j * safe_angle(z))


def initial_state(G, u_des, beta) -> AdmmState:
    """Pressure-matching start: ``d = d_PM``, ``a = |G d|``, ``theta = arg(G d)``, ``lam = 0``."""
    d = solve_pm(G, u_des, beta).values
    z = _entries(G) @ d
    return AdmmState(np.abs(z), safe_angle(z), d, np.zeros_like(z))


def update_phase_amplitude(Gd, lam, u, gamma, rho):
    """Closed-form ``(theta, a)`` minimizer of the augmented Lagrangian."""
    w = Gd + lam / rho
    theta = safe_angle((1 - gamma) * u + 0.5 * rho * w)
    a = (np.abs(2 * (1 - gamma) * u + rho * w) + 2 * gamma * np.abs(u)) / (rho + 2)
    return theta, a


def augmented_lagrangian(G, u_des, state: AdmmState, gamma, beta, rho) -> float:
    """Augmented Lagrangian value, multiplier term ``Re[lam^H (G d - z)]``."""
    g = _entries(G)
    u = _values(u_des)
    z = state.a * np.exp(1j * state.theta)
    r = g @ state.d - z
    return float(
        (1 - gamma) * np.sum(np.abs(z - u) ** 2)
        + gamma * np.sum((state.a - np.abs(u)) ** 2)
        + beta * np.real(np.vdot(state.d, state.d))
        + np.real(np.vdot(state.lam, r))
        + 0.5 * rho * np.sum(np.abs(r) ** 2)
    )


def solve_combined_admm(G, u_des, config: SolverConfig = SolverConfig(), init: AdmmState | None = None,
                        gamma: float | None = None, beta: float | None = None):
    """ADMM for the blended pressure/amplitude matching cost at one frequency.

    Parameters
    ----------
    G : TransferMatrix or ndarray of shape (N, L)
    u_des : PressureVector or ndarray of shape (N,)
    config : SolverConfig
    init : AdmmState, optional
        Starting iterate; defaults to :func:`initial_state`.
    gamma, beta : float, optional
        Override the values derived from ``config`` (frequency of ``G``).

    Returns
    -------
    signal : DrivingSignal
    state : AdmmState
        Final iterate, usable as a warm start.

    Notes
    -----
    Each iteration updates ``theta`` and ``a`` in closed form, then ``d`` from
    ``(G^H G + 2 beta / rho I) d = G^H (a exp(j theta) - lam / rho)`` with a
    cached Cholesky factor, then ``lam += rho (G d - a exp(j theta))``. The
    loop stops once both the primal residual ``||G d - a exp(j theta)||`` and
    the dual residual ``rho ||G (d_new - d_old)||`` fall below
    ``tol_primal * ||u_des||``, once the relative change of ``d`` drops below
    ``tol_change``, or after ``max_iters`` iterations.
    """
    g = _entries(G)
    u = _values(u_des)
    n, num_ls = g.shape
    if u.shape != (n,):
        raise ValueError(f"G has {n} rows but u_des has shape {u.shape}")
    freq = _frequency(G, u_des)
    if gamma is None:
        gamma = config.gamma_at(freq)
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if beta is None:
        beta = config.beta_for(G if isinstance(G, TransferMatrix) else g)
    rho = config.rho

    state = initial_state(G, u, beta) if init is None else init.copy()
    if state.d.shape != (num_ls,) or state.lam.shape != (n,):
        raise ValueError("initial state does not match problem dimensions")

    factor = _factor(_gram(G), 2 * beta / rho, allow_singular=True)
    gh = g.conj().T
    diag = SolveDiagnostics(converged=False, reason="max_iters", gamma=float(gamma), beta=float(beta))
    # tol * sqrt(N) * rms(u): the residual test does not depend on the source gain
    primal_tol = config.tol_primal * float(np.linalg.norm(u))
    d, lam = state.d, state.lam
    Gd = Gd_prev = g @ d
    theta, a = state.theta, state.a

    for it in range(1, config.max_iters + 1):
        theta, a = update_phase_amplitude(Gd, lam, u, gamma, rho)
        z = a * np.exp(1j * theta)
        d_new = splin.cho_solve(factor, gh @ (z - lam / rho), check_finite=False)
        Gd = g @ d_new
        r = Gd - z
        lam = lam + rho * r

        if not (np.all(np.isfinite(d_new)) and np.all(np.isfinite(lam))):
            raise DivergenceError(f"non-finite iterate at iteration {it}", iteration=it, frequency_hz=freq)

        primal = float(np.linalg.norm(r))
        dual = rho * float(np.linalg.norm(Gd - Gd_prev))
        Gd_prev = Gd
        norm_d = np.linalg.norm(d_new)
        change = float(np.linalg.norm(d_new - d) / norm_d) if norm_d > 0 else float(np.linalg.norm(d_new - d))
        d = d_new
        diag.iterations = it
        diag.primal_residual_history.append(primal)
        diag.cost_history.append(cost_J(g, d, u, gamma, beta))

        if primal <= primal_tol and dual <= primal_tol:
            diag.converged, diag.reason = True, "residual"
            break
        if change <= config.tol_change:
            diag.converged, diag.reason = True, "change"
            break

    logger.debug("ADMM at %.1f Hz: %d iterations (%s)", freq, diag.iterations, diag.reason)
    final = AdmmState(a, theta, d, lam)
    return DrivingSignal(d, freq, diag), final


def solve_frequency(scene, frequency_hz, config: SolverConfig, method="combined", init=None):
    """Build ``G`` and ``u_des`` for one frequency of ``scene`` and solve.

    ``method`` is ``"pm"``, ``"am"`` (gamma fixed at 1) or ``"combined"``.
    Returns ``(signal, state)``; ``state`` is ``None`` for ``"pm"``.
    """
    G = build_transfer_matrix(scene, frequency_hz)
    u = desired_pressure(scene, frequency_hz)
    beta = config.beta_for(G)
    if method == "pm":
        return solve_pm(G, u, beta), None
    if method == "am":
        return solve_combined_admm(G, u, config, init=init, gamma=1.0, beta=beta)
    if method == "combined":
        return solve_combined_admm(G, u, config, init=init, beta=beta)
    raise ValueError(f"unknown method {method!r}")


def warm_start_sweep(scene, frequencies: Sequence[float], config: SolverConfig = SolverConfig(),
                     method="combined"):
    """Solve ascending frequencies in order, seeding each ADMM run with the previous final state."""
    freqs = np.asarray(frequencies, dtype=float)
    # equal neighbours allowed so that a bin can be re-solved from its own state
    if np.any(np.diff(freqs) < 0):
        raise ValueError("frequencies must be ascending")
    out = []
    state = None
    for f in freqs:
        try:
            sig, state = solve_frequency(scene, f, config, method, init=state)
        except SolverError as exc:
            raise type(exc)(f"at {f:g} Hz: {exc}") from exc
        out.append(sig)
    return out


def cold_sweep(scene, frequencies, config: SolverConfig = SolverConfig(), method="combined", jobs=1):
    """Independent per-frequency solves, optionally on a thread pool; ordered by frequency."""
    freqs = [float(f) for f in frequencies]

    def one(f):
        return solve_frequency(scene, f, config, method)[0]

    if jobs <= 1:
        return [one(f) for f in freqs]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, freqs))


def with_gamma(config: SolverConfig, gamma: float) -> SolverConfig:
    return replace(config, gamma_mode=FixedGamma(gamma))
