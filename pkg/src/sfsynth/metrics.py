"""Evaluation of synthesized fields.

Error metrics are normalized by the desired-field energy. The ILD metrics
work on externally supplied ear transfer functions (:class:`BinauralSet`);
:func:`synthetic_binaural` builds a crude shadow-free two-point "head" for
smoke tests only: it is not a physical HRTF model.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .acoustics import greens_matrix

DB_FLOOR = -200.0
EAR_OFFSET = 0.09


class MetricError(ValueError):
    """A metric is undefined for the given input (e.g. zero normalization)."""


def _g(G):
    return np.asarray(getattr(G, "entries", G), dtype=complex)


def _v(x):
    return np.asarray(getattr(x, "values", x), dtype=complex)


def _stack(d_seq):
    if isinstance(d_seq, np.ndarray) and d_seq.ndim == 2:
        return d_seq.astype(complex)
    return np.stack([_v(d) for d in d_seq])


# ------------------------------------------------------------ field errors
def discrete_synthesis_error(G, d, u_des) -> float:
    """``||G d - u||^2 / ||u||^2``."""
    u = _v(u_des)
    den = np.sum(np.abs(u) ** 2)
    if den == 0:
        raise MetricError("desired field is zero; normalized error undefined")
    return float(np.sum(np.abs(_g(G) @ _v(d) - u) ** 2) / den)


def amplitude_error(G, d, u_des) -> float:
    """``|| |G d| - |u| ||^2 / ||u||^2``."""
    u = _v(u_des)
    den = np.sum(np.abs(u) ** 2)
    if den == 0:
        raise MetricError("desired field is zero; normalized error undefined")
    return float(np.sum((np.abs(_g(G) @ _v(d)) - np.abs(u)) ** 2) / den)


def pointwise_amplitude_error(G, d, u_des) -> np.ndarray:
    """Per-point ``(|p_n| - |u_n|)^2 / |u_n|^2``."""
    u = _v(u_des)
    if np.any(u == 0):
        raise MetricError("desired field vanishes at an evaluation point")
    return (np.abs(_g(G) @ _v(d)) - np.abs(u)) ** 2 / np.abs(u) ** 2


def pointwise_synthesis_error(G, d, u_des) -> np.ndarray:
    u = _v(u_des)
    if np.any(u == 0):
        raise MetricError("desired field vanishes at an evaluation point")
    return np.abs(_g(G) @ _v(d) - u) ** 2 / np.abs(u) ** 2


# ------------------------------------------------------- amplitude response
@dataclass
class AmplitudeResponse:
    frequencies: np.ndarray
    magnitude_db: np.ndarray

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.magnitude_db = np.asarray(self.magnitude_db, dtype=float)
        if self.frequencies.shape != self.magnitude_db.shape:
            raise ValueError("frequencies and magnitudes must have equal length")


def to_db(x):
    mag = np.abs(np.asarray(x))
    with np.errstate(divide="ignore"):
        out = 20 * np.log10(mag)
    return np.maximum(out, DB_FLOOR)


def amplitude_response_at(point, scene, d_seq) -> AmplitudeResponse:
    """Synthesized magnitude (dB) at ``point`` for each driving signal in ``d_seq``."""
    point = np.asarray(point, dtype=float).reshape(1, 3)
    freqs = np.array([d.frequency_hz for d in d_seq], dtype=float)
    values = np.array([
        (greens_matrix(scene.loudspeakers, point, f, scene.speed_of_sound) @ _v(d))[0]
        for f, d in zip(freqs, d_seq)
    ])
    return AmplitudeResponse(freqs, to_db(values))


def desired_response_at(point, scene, frequencies) -> AmplitudeResponse:
    point = np.asarray(point, dtype=float).reshape(1, 3)
    src = np.asarray(scene.desired.position).reshape(1, 3)
    freqs = np.asarray(frequencies, dtype=float)
    values = np.array([scene.desired.gain * greens_matrix(src, point, f, scene.speed_of_sound)[0, 0]
                       for f in freqs])
    return AmplitudeResponse(freqs, to_db(values))


def flatness_std_db(resp: AmplitudeResponse, desired: AmplitudeResponse, band) -> float:
    """Standard deviation (population) of ``resp - desired`` in dB within ``band = (lo, hi)``."""
    if not np.allclose(resp.frequencies, desired.frequencies, rtol=1e-9, atol=0):
        raise ValueError("responses must share a frequency grid")
    lo, hi = band
    mask = (resp.frequencies >= lo) & (resp.frequencies <= hi)
    if not np.any(mask):
        raise MetricError(f"no frequencies in band [{lo}, {hi}] Hz")
    return float(np.std(resp.magnitude_db[mask] - desired.magnitude_db[mask]))


# -------------------------------------------------------------------- ILD
@dataclass
class BinauralSet:
    """Ear transfer functions on a [position][azimuth][frequency][loudspeaker] lattice.

    Stored on disk as ``.npz`` with arrays ``positions`` (P, 3), ``azimuths``
    (A,), ``frequencies`` (F,), ``left`` and ``right`` (P, A, F, L) complex.
    """

    positions: np.ndarray
    azimuths: np.ndarray
    frequencies: np.ndarray
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.azimuths = np.asarray(self.azimuths, dtype=float)
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.left = np.asarray(self.left, dtype=complex)
        self.right = np.asarray(self.right, dtype=complex)
        shape = (len(self.positions), len(self.azimuths), len(self.frequencies))
        if self.left.shape != self.right.shape or self.left.ndim != 4 or self.left.shape[:3] != shape:
            raise ValueError(f"ear data must have shape {shape + ('L',)}")
        if np.any(np.diff(self.frequencies) <= 0):
            raise ValueError("binaural frequencies must be ascending")

    def save(self, path):
        np.savez(path, positions=self.positions, azimuths=self.azimuths,
                 frequencies=self.frequencies, left=self.left, right=self.right)

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            return cls(data["positions"], data["azimuths"], data["frequencies"],
                       data["left"], data["right"])


def experiment_azimuths():
    """Head orientations ``0, pi/32, ..., 31 pi/32``."""
    return np.arange(32) * np.pi / 32


def synthetic_binaural(sources, positions, azimuths, frequencies, c=343.0, ear_offset=EAR_OFFSET):
    """Free-field two-point ear model (NON-PHYSICAL, no head shadowing).

    Ears sit ``ear_offset`` m to the left and right of each head position for
    a head facing azimuth ``phi`` in the x-y plane.
    """
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    azimuths = np.asarray(azimuths, dtype=float)
    freqs = np.asarray(frequencies, dtype=float)
    shape = (len(positions), len(azimuths), len(freqs), len(sources))
    left = np.empty(shape, dtype=complex)
    right = np.empty(shape, dtype=complex)
    for p, pos in enumerate(positions):
        for a, phi in enumerate(azimuths):
            lateral = ear_offset * np.array([-np.sin(phi), np.cos(phi), 0.0])
            ears = np.stack([pos + lateral, pos - lateral])
            for f, freq in enumerate(freqs):
                h = greens_matrix(sources, ears, freq, c)
                left[p, a, f], right[p, a, f] = h[0], h[1]
    return BinauralSet(positions, azimuths, freqs, left, right)


def ild(binaural: BinauralSet, d_seq) -> np.ndarray:
    """Interaural level difference (dB) per [position][azimuth].

    Ear signals are ``b(omega) = sum_l d_l(omega) h_l(omega)``; the energy
    ratio is taken over all frequency bins of the set. ``d_seq`` is a list of
    driving signals on the set's frequencies or an (F, L) array.
    """
    d = _stack(d_seq)
    if isinstance(d_seq, np.ndarray):
        freqs = binaural.frequencies
    else:
        freqs = np.array([x.frequency_hz for x in d_seq], dtype=float)
    if d.shape != (len(binaural.frequencies), binaural.left.shape[-1]):
        raise ValueError(f"driving signals must have shape {(len(binaural.frequencies), binaural.left.shape[-1])}")
    if not np.allclose(freqs, binaural.frequencies, rtol=1e-9, atol=0):
        raise ValueError("driving-signal frequencies do not match the binaural data")
    bl = np.einsum("pafl,fl->paf", binaural.left, d)
    br = np.einsum("pafl,fl->paf", binaural.right, d)
    el = np.sum(np.abs(bl) ** 2, axis=-1)
    er = np.sum(np.abs(br) ** 2, axis=-1)
    if np.any(er == 0):
        p, a = np.argwhere(er == 0)[0]
        raise MetricError(f"zero right-ear energy at position {p}, azimuth {a}")
    with np.errstate(divide="ignore"):
        return 10 * np.log10(el / er)


def ild_normalized_error(syn, ref) -> np.ndarray:
    """Per-position ``sum_phi |ILD_syn - ILD_ref| / sum_phi |ILD_ref|``."""
    syn = np.asarray(syn, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if syn.shape != ref.shape or syn.ndim != 2:
        raise ValueError("ILD arrays must share a (positions, azimuths) shape")
    den = np.sum(np.abs(ref), axis=1)
    if np.any(den == 0):
        raise MetricError("reference ILD is zero over all azimuths at some position")
    return np.sum(np.abs(syn - ref), axis=1) / den


# ----------------------------------------------------------------- export
def write_long_csv(path, rows, header=("position", "key", "value")):
    """Long-format CSV; floats at 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{x:.17g}" if isinstance(x, (float, np.floating)) else x for x in row])


def write_json(path, summary):
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))
