"""Free-field monopole transfer functions and field rendering.

Time dependence is ``exp(+j omega t)``, so a source at distance ``r`` contributes
``exp(-j k r) / (4 pi r)``: propagation delay shows up as negative phase.
Pressures are dimensionless (unit-strength monopoles, no SPL calibration).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .scene import MIN_SOURCE_DISTANCE, Scene


class SingularityError(ValueError):
    """Green's function evaluated at (near) zero source-receiver distance."""


def wavenumber(frequency_hz, c):
    return 2 * np.pi * np.asarray(frequency_hz, dtype=float) / c


def greens_free_field(src, rcv, frequency_hz, c=343.0):
    """Free-field Green's function between two points.

    Parameters
    ----------
    src, rcv : array_like of shape (3,)
    frequency_hz : float
        Non-negative frequency.
    c : float
        Speed of sound in m/s.

    Returns
    -------
    complex
        ``exp(-j k r) / (4 pi r)`` with ``k = 2 pi f / c``.
    """
    if frequency_hz < 0:
        raise ValueError("frequency must be non-negative")
    r = float(np.linalg.norm(np.asarray(src, dtype=float) - np.asarray(rcv, dtype=float)))
    if r <= MIN_SOURCE_DISTANCE:
        raise SingularityError(f"source and receiver coincide (distance {r:g} m)")
    k = 2 * np.pi * frequency_hz / c
    return complex(np.exp(-1j * k * r) / (4 * np.pi * r))


def greens_matrix(sources, receivers, frequency_hz, c=343.0):
    """Transfer functions from every source (columns) to every receiver (rows)."""
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    receivers = np.atleast_2d(np.asarray(receivers, dtype=float))
    if frequency_hz < 0:
        raise ValueError("frequency must be non-negative")
    r = cdist(receivers, sources)
    bad = np.argwhere(r <= MIN_SOURCE_DISTANCE)
    if len(bad):
        n, l = bad[0]
        raise SingularityError(f"receiver {n} coincides with source {l}")
    k = 2 * np.pi * frequency_hz / c
    return np.exp(-1j * k * r) / (4 * np.pi * r)


@dataclass(eq=False)
class TransferMatrix:
    """Transfer matrix ``G`` (rows: receivers, columns: loudspeakers) at one frequency.

    The Gram matrix ``G^H G`` is computed on first access and cached.
    """

    entries: np.ndarray
    frequency_hz: float
    _gram: np.ndarray | None = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def shape(self):
        return self.entries.shape

    @property
    def gram(self) -> np.ndarray:
        if self._gram is None:
            with self._lock:
                if self._gram is None:
                    g = self.entries.conj().T @ self.entries
                    # exact Hermitian symmetry for the Cholesky factorizations downstream
                    self._gram = 0.5 * (g + g.conj().T)
        return self._gram

    @property
    def has_gram(self) -> bool:
        return self._gram is not None

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


@dataclass(frozen=True, eq=False)
class PressureVector:
    values: np.ndarray
    frequency_hz: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if not np.all(np.isfinite(vals)):
            raise ValueError("pressure values must be finite")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def build_transfer_matrix(scene: Scene, frequency_hz: float, target: str = "control") -> TransferMatrix:
    """Assemble ``G`` for the control (default) or evaluation grid of ``scene``."""
    points = scene.points(target)
    if len(points) == 0:
        raise ValueError(f"scene has no {target} points")
    try:
        g = greens_matrix(scene.loudspeakers, points, frequency_hz, scene.speed_of_sound)
    except SingularityError as exc:
        raise SingularityError(f"{target} grid: {exc}") from exc
    return TransferMatrix(g, float(frequency_hz))


def desired_pressure(scene: Scene, frequency_hz: float, target: str = "control") -> PressureVector:
    """Desired (primary point source) pressure on a grid of ``scene``."""
    points = scene.points(target)
    g = greens_matrix(scene.desired.position, points, frequency_hz, scene.speed_of_sound)[:, 0]
    return PressureVector(scene.desired.gain * g, float(frequency_hz))


def synthesize_field(G, d) -> PressureVector:
    """Synthesized pressure ``G d``.

    ``G`` may be a :class:`TransferMatrix` or an array; ``d`` a driving signal
    object (anything with ``.values``) or an array.
    """
    entries = G.entries if isinstance(G, TransferMatrix) else np.asarray(G)
    values = np.asarray(getattr(d, "values", d))
    if entries.ndim != 2 or values.shape != (entries.shape[1],):
        raise ValueError(f"dimension mismatch: G is {entries.shape}, d has shape {values.shape}")
    freq = getattr(G, "frequency_hz", getattr(d, "frequency_hz", float("nan")))
    return PressureVector(entries @ values, freq)
