"""Joint multi-frequency design and conversion to FIR filters.

The broadband problem couples neighbouring bins through

.. math::

   \\alpha \\sum_{f \\ge 2} \\|d_f - d_{f-1}\\|^2,

on top of the per-bin blended matching cost. ADMM keeps the per-bin phase and
amplitude updates; the driving-signal update becomes one Hermitian positive
definite block-tridiagonal system over all bins, factored once with block
Thomas elimination and re-solved every iteration.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as splin

from .acoustics import TransferMatrix, build_transfer_matrix, desired_pressure
from .solvers import (DivergenceError, DrivingSignal, SolveDiagnostics, SolverConfig,
                      initial_state, update_phase_amplitude)

logger = logging.getLogger(__name__)


class GridError(ValueError):
    """Driving-signal frequencies do not sit on the DFT grid."""


# -------------------------------------------------------------- penalties
def differential_penalty(d_seq) -> float:
    """Sum of squared differences between driving signals of adjacent bins."""
    arr = _stack_values(d_seq)
    if arr.shape[0] < 2:
        return 0.0
    return float(np.sum(np.abs(np.diff(arr, axis=0)) ** 2))


def _stack_values(d_seq):
    rows = [np.asarray(getattr(d, "values", d), dtype=complex) for d in d_seq]
    if not rows:
        raise ValueError("need at least one driving signal")
    if len({r.shape for r in rows}) != 1 or rows[0].ndim != 1:
        raise ValueError("all driving signals must be vectors of the same length")
    return np.stack(rows)


# ------------------------------------------------------------ block solver
class BlockTridiagonalFactor:
    """Block LDL-style factorization of a Hermitian positive definite block-tridiagonal matrix.

    Parameters
    ----------
    diag : ndarray of shape (F, L, L)
        Diagonal blocks ``A[f, f]``.
    lower : ndarray of shape (F-1, L, L)
        Sub-diagonal blocks ``A[f+1, f]``; the super-diagonal is their
        conjugate transpose.
    """

    def __init__(self, diag, lower):
        diag = np.asarray(diag, dtype=complex)
        lower = np.asarray(lower, dtype=complex)
        num_blocks = diag.shape[0]
        if lower.shape != (max(num_blocks - 1, 0),) + diag.shape[1:]:
            raise ValueError("lower blocks must have shape (F-1, L, L)")
        self.lower = lower
        self.factors = []
        # coupling[f] = A[f, f-1] S_{f-1}^{-1}
        self.coupling = []
        schur = diag[0]
        for f in range(num_blocks):
            if f > 0:
                c = splin.cho_solve(self.factors[-1], lower[f - 1].conj().T).conj().T
                self.coupling.append(c)
                schur = diag[f] - c @ lower[f - 1].conj().T
            schur = 0.5 * (schur + schur.conj().T)
            self.factors.append(splin.cho_factor(schur, lower=True))

    def solve(self, rhs):
        """Solve for ``rhs`` of shape (F, L) (or (F, L, K))."""
        y = np.array(rhs, dtype=complex)
        num_blocks = len(self.factors)
        for f in range(1, num_blocks):
            y[f] = y[f] - self.coupling[f - 1] @ y[f - 1]
        x = np.empty_like(y)
        x[-1] = splin.cho_solve(self.factors[-1], y[-1])
        for f in range(num_blocks - 2, -1, -1):
            x[f] = splin.cho_solve(self.factors[f], y[f] - self.lower[f].conj().T @ x[f + 1])
        return x


def d_update_blocks(grams, betas, alpha, rho):
    """Blocks of the joint driving-signal system.

    Diagonal ``(rho/2) G_f^H G_f + (beta_f + c_f alpha) I`` with ``c_f`` the
    number of neighbouring bins, off-diagonal ``-alpha I``.
    """
    grams = np.asarray(grams)
    num_bins, num_ls, _ = grams.shape
    neighbours = np.full(num_bins, 2.0)
    neighbours[0] = neighbours[-1] = 1.0
    if num_bins == 1:
        neighbours[:] = 0.0
    eye = np.eye(num_ls)
    diag = 0.5 * rho * grams + (np.asarray(betas, dtype=float) + neighbours * alpha)[:, None, None] * eye
    lower = np.broadcast_to(-alpha * eye, (num_bins - 1, num_ls, num_ls)).astype(complex)
    return diag, lower


# --------------------------------------------------------------- problem
@dataclass
class BroadbandProblem:
    """Multi-bin design problem.

    ``beta`` may be a scalar or one value per bin.
    """

    frequencies: np.ndarray
    transfer: list
    desired: list
    gammas: np.ndarray
    alpha: float = 0.0
    beta: float | np.ndarray = 0.0
    rho: float = 1.0

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.gammas = np.asarray(self.gammas, dtype=float)
        num_bins = len(self.frequencies)
        if not (len(self.transfer) == len(self.desired) == len(self.gammas) == num_bins):
            raise ValueError("frequencies, transfer, desired and gammas must have equal length")
        if num_bins == 0:
            raise ValueError("need at least one frequency bin")
        if np.any(np.diff(self.frequencies) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        if np.any((self.gammas < 0) | (self.gammas > 1)):
            raise ValueError("gammas must lie in [0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        self.beta = np.broadcast_to(np.asarray(self.beta, dtype=float), (num_bins,)).copy()
        if np.any(self.beta < 0):
            raise ValueError("beta must be >= 0")
        shapes = {np.shape(getattr(G, "entries", G)) for G in self.transfer}
        if len(shapes) != 1:
            raise ValueError("all transfer matrices must have the same shape")

    @property
    def num_bins(self):
        return len(self.frequencies)

    @classmethod
    def from_scene(cls, scene, frequencies, config: SolverConfig = SolverConfig(), alpha=0.0):
        """Assemble bins for ``scene``; gamma and beta follow ``config`` per bin."""
        transfer = [build_transfer_matrix(scene, f) for f in frequencies]
        desired = [desired_pressure(scene, f) for f in frequencies]
        gammas = [config.gamma_at(f) for f in frequencies]
        betas = [config.beta_for(G) for G in transfer]
        return cls(np.asarray(frequencies, dtype=float), transfer, desired, np.asarray(gammas),
                   alpha=alpha, beta=np.asarray(betas), rho=config.rho)

    def stacked(self):
        g = np.stack([np.asarray(getattr(G, "entries", G), dtype=complex) for G in self.transfer])
        u = np.stack([np.asarray(getattr(u, "values", u), dtype=complex) for u in self.desired])
        grams = np.stack([G.gram if isinstance(G, TransferMatrix) else
                          np.asarray(G).conj().T @ np.asarray(G) for G in self.transfer])
        return g, u, 0.5 * (grams + np.conj(np.swapaxes(grams, -1, -2)))


def broadband_cost(problem: BroadbandProblem, d_seq) -> float:
    """Objective of the joint design for the driving signals ``d_seq``."""
    g, u, _ = problem.stacked()
    d = _stack_values(d_seq)
    p = np.einsum("fnl,fl->fn", g, d)
    gam = problem.gammas[:, None]
    data = (1 - gam) * np.abs(p - u) ** 2 + gam * (np.abs(p) - np.abs(u)) ** 2
    return float(np.sum(data) + problem.alpha * differential_penalty(d)
                 + np.sum(problem.beta * np.sum(np.abs(d) ** 2, axis=1)))


def solve_broadband(problem: BroadbandProblem, max_iters=200, tol_primal=1e-6, tol_change=1e-8,
                    init=None):
    """ADMM on the joint multi-bin problem.

    Parameters
    ----------
    problem : BroadbandProblem
    max_iters : int
    tol_primal : float
        Stop once, in every bin, the primal and dual residuals are below
        ``tol_primal * ||u_f||``.
    tol_change : float
        Stop once the relative change of all stacked driving signals is below this.
    init : ndarray of shape (F, L), optional
        Starting driving signals; defaults to per-bin pressure matching.

    Returns
    -------
    list of DrivingSignal
        One per bin; each carries that bin's residual and cost histories.
    """
    g, u, grams = problem.stacked()
    num_bins, n, num_ls = g.shape
    rho = problem.rho
    if init is None:
        d = np.stack([initial_state(problem.transfer[f], u[f], problem.beta[f]).d for f in range(num_bins)])
    else:
        d = np.array(init, dtype=complex)
        if d.shape != (num_bins, num_ls):
            raise ValueError("init must have shape (F, L)")
    lam = np.zeros((num_bins, n), dtype=complex)
    factor = BlockTridiagonalFactor(*d_update_blocks(grams, problem.beta, problem.alpha, rho))
    gh = np.conj(np.swapaxes(g, -1, -2))
    gam = problem.gammas[:, None]
    tol = tol_primal * np.linalg.norm(u, axis=1)
    diags = [SolveDiagnostics(converged=False, reason="max_iters", gamma=float(problem.gammas[f]),
                              beta=float(problem.beta[f])) for f in range(num_bins)]
    Gd = np.einsum("fnl,fl->fn", g, d)
    Gd_prev = Gd
    converged, reason = False, "max_iters"

    for it in range(1, max_iters + 1):
        theta, a = update_phase_amplitude(Gd, lam, u, gam, rho)
        z = a * np.exp(1j * theta)
        rhs = 0.5 * rho * np.einsum("fln,fn->fl", gh, z - lam / rho)
        d_new = factor.solve(rhs)
        Gd = np.einsum("fnl,fl->fn", g, d_new)
        r = Gd - z
        lam = lam + rho * r
        if not (np.all(np.isfinite(d_new)) and np.all(np.isfinite(lam))):
            bad = int(np.argmax(~np.all(np.isfinite(d_new), axis=1) | ~np.all(np.isfinite(lam), axis=1)))
            raise DivergenceError(f"non-finite iterate at iteration {it}, bin {bad}",
                                  iteration=it, frequency_hz=float(problem.frequencies[bad]))
        primal = np.linalg.norm(r, axis=1)
        dual = rho * np.linalg.norm(Gd - Gd_prev, axis=1)
        Gd_prev = Gd
        norm_d = np.linalg.norm(d_new)
        change = np.linalg.norm(d_new - d) / norm_d if norm_d > 0 else np.linalg.norm(d_new - d)
        d = d_new
        p_cost = (1 - gam) * np.abs(Gd - u) ** 2 + gam * (np.abs(Gd) - np.abs(u)) ** 2
        bin_cost = p_cost.sum(axis=1) + problem.beta * np.sum(np.abs(d) ** 2, axis=1)
        for f in range(num_bins):
            diags[f].iterations = it
            diags[f].primal_residual_history.append(float(primal[f]))
            diags[f].cost_history.append(float(bin_cost[f]))
        if np.all(primal <= tol) and np.all(dual <= tol):
            converged, reason = True, "residual"
            break
        if change <= tol_change:
            converged, reason = True, "change"
            break

    logger.debug("broadband ADMM: %d iterations (%s)", it, reason)
    for dg in diags:
        dg.converged, dg.reason = converged, reason
    return [DrivingSignal(d[f], float(problem.frequencies[f]), diags[f]) for f in range(num_bins)]


# ------------------------------------------------------------------ FIRs
@dataclass
class FilterBank:
    """``L`` real FIR filters of equal length; ``taps`` has shape (L, T)."""

    taps: np.ndarray
    sample_rate_hz: float
    modeling_delay_samples: int = 0
    frequencies: np.ndarray = field(default_factory=lambda: np.zeros(0))
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.taps = np.atleast_2d(np.asarray(self.taps, dtype=float))
        if not np.all(np.isfinite(self.taps)):
            raise ValueError("filter taps must be finite")
        if self.modeling_delay_samples < 0:
            raise ValueError("modeling delay must be >= 0")
        self.frequencies = np.asarray(self.frequencies, dtype=float)

    @property
    def num_channels(self):
        return self.taps.shape[0]

    @property
    def length(self):
        return self.taps.shape[1]


def dft_bins(num_bins, fft_size, sample_rate_hz):
    """Frequencies of DFT bins ``1..num_bins``."""
    return np.arange(1, num_bins + 1) * (sample_rate_hz / fft_size)


def fir_from_spectra(d_seq: Sequence[DrivingSignal], fft_size: int, sample_rate_hz: float,
                     modeling_delay_samples: int | None = None) -> FilterBank:
    """Real FIR filters from driving signals on DFT bins ``1..F``.

    DC, Nyquist and bins above ``F`` are zero; the spectrum is made Hermitian
    and delayed by ``modeling_delay_samples`` (default ``fft_size // 2``)
    before the inverse DFT.
    """
    if fft_size < 4 or fft_size % 2:
        raise ValueError("fft_size must be an even integer >= 4")
    if modeling_delay_samples is None:
        modeling_delay_samples = fft_size // 2
    d = _stack_values(d_seq)
    num_bins = d.shape[0]
    if num_bins > fft_size // 2 - 1:
        raise GridError(f"{num_bins} bins do not fit below Nyquist for fft_size {fft_size}")
    freqs = np.array([getattr(s, "frequency_hz", np.nan) for s in d_seq], dtype=float)
    expected = dft_bins(num_bins, fft_size, sample_rate_hz)
    if not np.allclose(freqs, expected, rtol=1e-9, atol=0):
        raise GridError("driving-signal frequencies must be the DFT bins k * fs / fft_size, k = 1..F")

    k = np.arange(1, num_bins + 1)
    spectrum = np.zeros((d.shape[1], fft_size), dtype=complex)
    spectrum[:, 1:num_bins + 1] = (d * np.exp(-2j * np.pi * k * modeling_delay_samples / fft_size)[:, None]).T
    spectrum[:, fft_size - num_bins:] = np.conj(spectrum[:, num_bins:0:-1])
    taps = np.fft.ifft(spectrum, axis=1)
    peak = max(np.abs(taps).max(), np.finfo(float).tiny)
    if np.abs(taps.imag).max() > 1e-12 * peak:
        raise RuntimeError("inverse transform is not real; spectrum is not Hermitian")
    return FilterBank(taps.real.copy(), float(sample_rate_hz), int(modeling_delay_samples), freqs)


def filter_spectra(bank: FilterBank, num_bins=None, compensate_delay=True):
    """DFT of the taps at bins ``1..num_bins``; shape (F, L).

    With ``compensate_delay`` the modeling-delay phase is removed, recovering
    the driving signals passed to :func:`fir_from_spectra`.
    """
    n = bank.length
    if num_bins is None:
        num_bins = len(bank.frequencies) or n // 2 - 1
    spec = np.fft.rfft(bank.taps, axis=1)[:, 1:num_bins + 1].T
    if compensate_delay:
        k = np.arange(1, num_bins + 1)
        spec = spec * np.exp(2j * np.pi * k * bank.modeling_delay_samples / n)[:, None]
    return spec


def centered_energy_fraction(bank: FilterBank, window=None) -> float:
    """Share of tap energy inside ``window`` samples (default ``T/4``) centered on the modeling delay."""
    n = bank.length
    window = n // 4 if window is None else int(window)
    idx = (bank.modeling_delay_samples + np.arange(window) - window // 2) % n
    total = np.sum(bank.taps ** 2)
    if total == 0:
        return 0.0
    return float(np.sum(bank.taps[:, idx] ** 2) / total)


def apply_fade(bank: FilterBank, length: int) -> FilterBank:
    """Raised-cosine fade-in and fade-out of ``length`` samples at the tap edges."""
    n = bank.length
    if length <= 0:
        return bank
    if 2 * length > n:
        raise ValueError("fade longer than half the filter")
    ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(length) + 0.5) / length)
    win = np.ones(n)
    win[:length] = ramp
    win[n - length:] = ramp[::-1]
    return FilterBank(bank.taps * win, bank.sample_rate_hz, bank.modeling_delay_samples,
                      bank.frequencies, dict(bank.metadata, fade_samples=int(length)))


# ---------------------------------------------------------------- export
def sidecar_path(wav_path) -> Path:
    return Path(wav_path).with_suffix(".json")


def write_filterbank(bank: FilterBank, wav_path, extra: dict | None = None) -> Path:
    """Write an ``L``-channel 32-bit float WAV (channel ``l`` = loudspeaker ``l``) plus JSON sidecar."""
    from scipy.io import wavfile

    wav_path = Path(wav_path)
    rate = int(round(bank.sample_rate_hz))
    if rate != bank.sample_rate_hz:
        raise ValueError("WAV export needs an integer sample rate")
    wavfile.write(wav_path, rate, np.ascontiguousarray(bank.taps.T, dtype="<f4"))
    meta = {
        "format": 1,
        "sample_rate_hz": bank.sample_rate_hz,
        "fft_size": bank.length,
        "channels": bank.num_channels,
        "channel_order": "loudspeaker index",
        "modeling_delay_samples": bank.modeling_delay_samples,
        "num_bins": int(len(bank.frequencies)),
        "frequency_range_hz": [float(bank.frequencies[0]), float(bank.frequencies[-1])]
        if len(bank.frequencies) else None,
    }
    meta.update(bank.metadata)
    if extra:
        meta.update(extra)
    side = sidecar_path(wav_path)
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return side


def read_filterbank(wav_path) -> FilterBank:
    """Load a filter bank WAV; metadata comes from the sidecar when present."""
    from scipy.io import wavfile

    rate, data = wavfile.read(wav_path)
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    side = sidecar_path(wav_path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    num_bins = meta.get("num_bins") or 0
    freqs = dft_bins(num_bins, data.shape[0], rate) if num_bins else np.zeros(0)
    return FilterBank(data.T, float(rate), int(meta.get("modeling_delay_samples", 0)), freqs, meta)
