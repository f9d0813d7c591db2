"""Driving-signal files.

CSV
    Header ``frequency_hz,gamma,loudspeaker,real,imag``, one row per
    (frequency, loudspeaker), ascending frequency; 17 significant digits.

Binary (little-endian)
    ``uint32 L``, ``uint32 F``, ``F x float64`` frequencies, then the
    ``F x L`` driving signals row-major (frequency-major) as
    ``(real, imag)`` float64 pairs.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .solvers import DrivingSignal, SolveDiagnostics

_HEADER = ["frequency_hz", "gamma", "loudspeaker", "real", "imag"]


def _fmt(x):
    return f"{float(x):.17g}"


def write_signals_csv(path, signals):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_HEADER)
        for sig in sorted(signals, key=lambda s: s.frequency_hz):
            gamma = sig.diagnostics.gamma
            for l, v in enumerate(sig.values):
                w.writerow([_fmt(sig.frequency_hz), "" if gamma is None else _fmt(gamma), l,
                            _fmt(v.real), _fmt(v.imag)])


def read_signals_csv(path):
    rows = {}
    gammas = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != _HEADER:
            raise ValueError(f"{path}: expected CSV header {','.join(_HEADER)}")
        for i, row in enumerate(reader, start=2):
            try:
                f = float(row["frequency_hz"])
                rows.setdefault(f, {})[int(row["loudspeaker"])] = complex(float(row["real"]), float(row["imag"]))
                if row["gamma"]:
                    gammas[f] = float(row["gamma"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}, line {i}: {exc}") from exc
    out = []
    for f in sorted(rows):
        ch = rows[f]
        if sorted(ch) != list(range(len(ch))):
            raise ValueError(f"{path}: loudspeaker indices at {f} Hz are not 0..L-1")
        vals = np.array([ch[l] for l in range(len(ch))])
        out.append(DrivingSignal(vals, f, SolveDiagnostics(gamma=gammas.get(f), reason="loaded")))
    return out


def write_signals_bin(path, signals):
    signals = sorted(signals, key=lambda s: s.frequency_hz)
    num_ls = len(signals[0].values)
    freqs = np.array([s.frequency_hz for s in signals], dtype="<f8")
    vals = np.stack([s.values for s in signals]).astype("<c16")
    with open(path, "wb") as fh:
        fh.write(np.array([num_ls, len(signals)], dtype="<u4").tobytes())
        fh.write(freqs.tobytes())
        # complex128 is stored as (real, imag) float64 pairs
        fh.write(vals.tobytes(order="C"))


def read_signals_bin(path):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated header")
    num_ls, num_f = (int(x) for x in np.frombuffer(raw[:8], dtype="<u4"))
    expected = 8 + 8 * num_f + 16 * num_f * num_ls
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for L={num_ls}, F={num_f}, got {len(raw)}")
    freqs = np.frombuffer(raw[8:8 + 8 * num_f], dtype="<f8")
    vals = np.frombuffer(raw[8 + 8 * num_f:], dtype="<c16").reshape(num_f, num_ls)
    return [DrivingSignal(vals[i].copy(), float(freqs[i]), SolveDiagnostics(reason="loaded"))
            for i in range(num_f)]


def write_signals(path, signals):
    if Path(path).suffix == ".csv":
        write_signals_csv(path, signals)
    else:
        write_signals_bin(path, signals)


def read_signals(path):
    if Path(path).suffix == ".csv":
        return read_signals_csv(path)
    return read_signals_bin(path)
