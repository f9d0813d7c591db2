"""Command-line front end.

Sub-commands: ``make-scene``, ``solve``, ``design-filters``, ``evaluate`` and
``render``. Exit codes: 0 success, 1 usage or input error, 2 (``solve`` only)
when some ADMM solve stopped at ``max_iters`` without converging.

Solver settings resolve as command-line flag, then the ``solver:`` section
of the scenario file, then built-in defaults. ``SFSYNTH_THREADS`` sets the
default worker count for independent per-frequency solves.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .acoustics import build_transfer_matrix, desired_pressure
from .broadband import (BroadbandProblem, apply_fade, dft_bins, filter_spectra, fir_from_spectra,
                        read_filterbank, solve_broadband, write_filterbank)
from .export import read_signals, write_signals
from .metrics import (BinauralSet, MetricError, amplitude_error, amplitude_response_at,
                      desired_response_at, discrete_synthesis_error, flatness_std_db, ild,
                      ild_normalized_error, experiment_azimuths, pointwise_amplitude_error,
                      synthetic_binaural, write_json, write_long_csv)
from .scene import SceneError, load_scene, experiment_scene_config
from .solvers import (DrivingSignal, FixedGamma, SigmoidGamma, SolverConfig, SolverError,
                      cold_sweep, warm_start_sweep)

logger = logging.getLogger("sfsynth")

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2

BUILTIN = {
    "beta": None,
    "beta_scale": 1e-3,
    "rho": 1.0,
    "max_iters": 200,
    "tol_primal": 1e-6,
    "tol_change": 1e-8,
    "gamma_ft": 2000.0,
    "gamma_sigma": 0.01,
    "alpha": 1.0,
    "fft_size": 256,
    "sample_rate": 32000,
    "fmax": 8000.0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers
def parse_freq_range(text):
    """``lo:hi:count`` -> ``count`` uniformly spaced frequencies, inclusive."""
    try:
        lo, hi, count = text.split(":")
        lo, hi, count = float(lo), float(hi), int(count)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi:count, got {text!r}")
    if count < 1 or lo <= 0 or hi < lo or (count > 1 and hi == lo):
        raise argparse.ArgumentTypeError(f"invalid frequency range {text!r}")
    return np.linspace(lo, hi, count) if count > 1 else np.array([lo])


def _band(text):
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}")
    return lo, hi


def _point(text):
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        vals = []
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return np.array(vals)


def _setting(args, scene, key):
    val = getattr(args, key, None)
    if val is not None:
        return val
    if key in scene.solver_defaults:
        return scene.solver_defaults[key]
    return BUILTIN[key]


def solver_config(args, scene, method):
    s = lambda k: _setting(args, scene, k)  # noqa: E731
    if method == "pm":
        gamma_mode = FixedGamma(0.0)
    elif method == "am":
        gamma_mode = FixedGamma(1.0)
    else:
        gamma_mode = SigmoidGamma.from_hz(float(s("gamma_ft")), float(s("gamma_sigma")))
    beta = s("beta")
    return SolverConfig(beta=None if beta is None else float(beta), rho=float(s("rho")),
                        gamma_mode=gamma_mode, max_iters=int(s("max_iters")),
                        tol_primal=float(s("tol_primal")), tol_change=float(s("tol_change")),
                        beta_scale=float(s("beta_scale")))


def config_dict(config: SolverConfig):
    mode = config.gamma_mode
    gm = {"fixed": mode.value} if isinstance(mode, FixedGamma) else \
        {"transition_hz": mode.omega_T / (2 * np.pi), "sigma": mode.sigma}
    return {"beta": config.beta, "beta_scale": config.beta_scale, "rho": config.rho, "gamma": gm,
            "max_iters": config.max_iters, "tol_primal": config.tol_primal, "tol_change": config.tol_change}


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def write_manifest(path, command, scene, config, frequencies, outputs, extra=None):
    """Run manifest; ``manifest_hash`` covers everything but the timestamps."""
    body = {
        "command": command,
        "scene_hash": scene.digest() if scene is not None else None,
        "solver_config": config_dict(config) if config is not None else None,
        "frequencies_hz": [float(f) for f in frequencies],
        "outputs": sorted(str(Path(p).name) for p in outputs),
        "version": __version__,
    }
    if extra:
        body.update(extra)
    manifest = dict(body, manifest_hash=_digest(body),
                    timestamps={"finished": time.strftime("%Y-%m-%dT%H:%M:%S%z")})
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _jobs(args):
    if getattr(args, "jobs", None):
        return args.jobs
    try:
        return max(1, int(os.environ.get("SFSYNTH_THREADS", "1")))
    except ValueError:
        return 1


def _add_solver_flags(p):
    p.add_argument("--method", choices=["pm", "am", "combined"], default="combined")
    p.add_argument("--gamma-ft", dest="gamma_ft", type=float, help="transition frequency in Hz")
    p.add_argument("--gamma-sigma", dest="gamma_sigma", type=float, help="sigmoid slope")
    p.add_argument("--beta", type=float, help="fixed regularization (default: scaled ||G^H G||^2 per bin)")
    p.add_argument("--beta-scale", dest="beta_scale", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--tol-primal", dest="tol_primal", type=float)
    p.add_argument("--tol-change", dest="tol_change", type=float)


def _check_method_flags(args):
    if args.method in ("pm", "am") and (args.gamma_ft is not None or args.gamma_sigma is not None):
        raise UsageError(f"--method {args.method} does not take --gamma-ft/--gamma-sigma")


# --------------------------------------------------------------- commands
def cmd_make_scene(args):
    Path(args.out).write_text(experiment_scene_config())
    return EXIT_OK


def cmd_solve(args):
    _check_method_flags(args)
    scene = load_scene(args.scene)
    config = solver_config(args, scene, args.method)
    freqs = np.array([args.freq]) if args.freq is not None else args.freq_range
    if args.method == "pm" or args.no_warm_start:
        signals = cold_sweep(scene, freqs, config, args.method, jobs=_jobs(args))
    else:
        signals = warm_start_sweep(scene, freqs, config, args.method)

    out = Path(args.out)
    write_signals(out, signals)
    diag_path = out.with_name(out.name + ".diag.json")
    write_json(diag_path, [{"frequency_hz": s.frequency_hz, **s.diagnostics.to_dict()} for s in signals])
    write_manifest(out.with_name(out.name + ".manifest.json"), "solve", scene, config, freqs,
                   [out, diag_path], {"method": args.method, "warm_start": not args.no_warm_start})
    if args.method != "pm" and not all(s.diagnostics.converged for s in signals):
        bad = sum(not s.diagnostics.converged for s in signals)
        logger.warning("%d of %d solves reached max_iters without converging", bad, len(signals))
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_design_filters(args):
    _check_method_flags(args)
    scene = load_scene(args.scene)
    config = solver_config(args, scene, args.method)
    fft_size = int(_setting(args, scene, "fft_size"))
    fs = float(_setting(args, scene, "sample_rate"))
    alpha = float(_setting(args, scene, "alpha"))
    fmax = float(_setting(args, scene, "fmax"))
    if fft_size < 4 or fft_size % 2:
        raise UsageError("--fft-size must be an even integer >= 4")
    if alpha < 0:
        raise UsageError("--alpha must be >= 0")
    num_bins = min(int(np.floor(fmax / (fs / fft_size) + 1e-9)), fft_size // 2 - 1)
    if num_bins < 1:
        raise UsageError("--fmax is below the first DFT bin")
    freqs = dft_bins(num_bins, fft_size, fs)
    problem = BroadbandProblem.from_scene(scene, freqs, config, alpha)
    signals = solve_broadband(problem, config.max_iters, config.tol_primal, config.tol_change)
    delay = fft_size // 2 if args.delay is None else args.delay
    bank = fir_from_spectra(signals, fft_size, fs, delay)
    if args.fade:
        bank = apply_fade(bank, args.fade)
    out = Path(args.out)
    cfg = config_dict(config)
    side = write_filterbank(bank, out, {"solver_config": cfg, "solver_config_hash": _digest(cfg),
                                        "alpha": alpha, "method": args.method,
                                        "converged": bool(signals[0].diagnostics.converged),
                                        "iterations": signals[0].diagnostics.iterations})
    write_manifest(out.with_name(out.name + ".manifest.json"), "design-filters", scene, config, freqs,
                   [out, side], {"alpha": alpha, "fft_size": fft_size, "sample_rate_hz": fs,
                                 "delay_samples": delay, "method": args.method})
    if not signals[0].diagnostics.converged:
        logger.warning("broadband ADMM reached max_iters (%d) without converging", config.max_iters)
    return EXIT_OK


def _load_inputs(args):
    if args.signals:
        return read_signals(args.signals)
    bank = read_filterbank(args.filters)
    if not len(bank.frequencies):
        raise UsageError("filter bank has no bin metadata; keep the .json sidecar next to the WAV")
    spec = filter_spectra(bank)
    return [DrivingSignal(spec[i], float(f)) for i, f in enumerate(bank.frequencies)]


def _evaluate_one(scene, signals, metrics, point, band, bins, rows, label):
    summary = {}
    freqs = np.array([s.frequency_hz for s in signals])
    if "synthesis_error" in metrics or "amplitude_error" in metrics:
        for grid in ("control", "eval"):
            if len(scene.points(grid)) == 0:
                continue
            se, ae = [], []
            for s in signals:
                G = build_transfer_matrix(scene, s.frequency_hz, grid)
                u = desired_pressure(scene, s.frequency_hz, grid)
                se.append(discrete_synthesis_error(G, s, u))
                ae.append(amplitude_error(G, s, u))
                if "amplitude_error" in metrics and grid == "eval":
                    for n, v in enumerate(pointwise_amplitude_error(G, s, u)):
                        rows.append([label, "pointwise_amplitude_error", n, s.frequency_hz, "", float(v)])
            for f, a, b in zip(freqs, se, ae):
                if "synthesis_error" in metrics:
                    rows.append([label, f"synthesis_error_{grid}", "", f, "", float(a)])
                if "amplitude_error" in metrics:
                    rows.append([label, f"amplitude_error_{grid}", "", f, "", float(b)])
            if "synthesis_error" in metrics:
                summary[f"mean_synthesis_error_{grid}"] = float(np.mean(se))
            if "amplitude_error" in metrics:
                summary[f"mean_amplitude_error_{grid}"] = float(np.mean(ae))
    if "amplitude_response" in metrics or "flatness" in metrics:
        resp = amplitude_response_at(point, scene, signals)
        des = desired_response_at(point, scene, freqs)
        if "amplitude_response" in metrics:
            for f, m, dm in zip(freqs, resp.magnitude_db, des.magnitude_db):
                rows.append([label, "amplitude_db", "point", f, "", float(m)])
                rows.append(["desired", "amplitude_db", "point", f, "", float(dm)])
        if "flatness" in metrics:
            summary["flatness_std_db"] = flatness_std_db(resp, des, band)
    if "ild" in metrics:
        binaural, reference = bins
        ild_syn = ild(binaural, signals)
        for p in range(ild_syn.shape[0]):
            for a, phi in enumerate(binaural.azimuths):
                rows.append([label, "ild_db", p, "", float(phi), float(ild_syn[p, a])])
        if reference is not None:
            gain = np.full((len(signals), 1), scene.desired.gain, dtype=complex)
            ild_ref = ild(reference, gain)
            ne = ild_normalized_error(ild_syn, ild_ref)
            for p, v in enumerate(ne):
                rows.append([label, "ild_normalized_error", p, "", "", float(v)])
            summary["ild_normalized_error"] = ne.tolist()
    return summary


def cmd_evaluate(args):
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    known = {"synthesis_error", "amplitude_error", "amplitude_response", "flatness", "ild"}
    unknown = set(metrics) - known
    if unknown:
        raise UsageError(f"unknown metric(s): {', '.join(sorted(unknown))}")
    if "ild" in metrics and not (args.binaural or args.synthetic_binaural):
        raise UsageError("the ild metric needs --binaural (or --synthetic-binaural)")
    scene = load_scene(args.scene)
    signals = _load_inputs(args)
    freqs = np.array([s.frequency_hz for s in signals])

    bins = (None, None)
    if "ild" in metrics:
        if args.binaural:
            binaural = BinauralSet.load(args.binaural)
            reference = BinauralSet.load(args.binaural_ref) if args.binaural_ref else None
        else:
            heads = scene.eval_points if len(scene.eval_points) else np.zeros((1, 3))
            az = experiment_azimuths()
            binaural = synthetic_binaural(scene.loudspeakers, heads, az, freqs, scene.speed_of_sound)
            reference = synthetic_binaural(np.array([scene.desired.position]), heads, az, freqs,
                                           scene.speed_of_sound)
        bins = (binaural, reference)

    rows = []
    results = {"input": _evaluate_one(scene, signals, metrics, args.point, args.band, bins, rows, "input")}
    if args.compare_pm:
        config = solver_config(args, scene, "pm")
        pm = cold_sweep(scene, freqs, config, "pm")
        results["pm"] = _evaluate_one(scene, pm, metrics, args.point, args.band, bins, rows, "pm")
        deltas = {}
        for k, v in results["input"].items():
            if k in results["pm"]:
                deltas[k] = (np.asarray(v) - np.asarray(results["pm"][k])).tolist()
        results["delta_input_minus_pm"] = deltas

    out = Path(args.out)
    csv_path = out.with_suffix(".csv")
    json_path = out.with_suffix(".json")
    write_long_csv(csv_path, rows, header=("method", "metric", "position", "frequency_hz", "azimuth", "value"))
    write_json(json_path, {"metrics": metrics, "point": list(map(float, args.point)),
                           "band_hz": list(args.band), "results": results})
    return EXIT_OK


def _read_audio(path):
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    if data.dtype == np.uint8:
        return rate, (data.astype(float) - 128) / 128
    if np.issubdtype(data.dtype, np.integer):
        return rate, data.astype(float) / -float(np.iinfo(data.dtype).min)
    return rate, np.asarray(data, dtype=float)


def render(taps, signal):
    """Convolve a mono signal with each filter; shape (len(signal) + T - 1, L)."""
    from scipy.signal import fftconvolve

    taps = np.atleast_2d(taps)
    return np.stack([fftconvolve(signal, h) for h in taps], axis=1)


def cmd_render(args):
    from scipy.io import wavfile

    bank = read_filterbank(args.filters)
    rate, mono = _read_audio(args.input)
    if mono.ndim != 1:
        raise UsageError("input WAV must be mono")
    if rate != bank.sample_rate_hz:
        raise UsageError(f"sample rate mismatch: filters {bank.sample_rate_hz:g} Hz, input {rate} Hz")
    out = render(bank.taps, mono)
    wavfile.write(args.out, rate, np.ascontiguousarray(out, dtype="<f4"))
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser():
    p = _Parser(prog="sfsynth", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-scene", help="write the free-field experiment scenario file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_scene)

    s = sub.add_parser("solve", help="per-frequency driving signals")
    s.add_argument("scene")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--freq", type=float)
    g.add_argument("--freq-range", dest="freq_range", type=parse_freq_range, metavar="LO:HI:COUNT")
    _add_solver_flags(s)
    s.add_argument("--no-warm-start", action="store_true", help="independent cold solves (parallelizable)")
    s.add_argument("--jobs", type=int, help="worker threads for cold solves")
    s.add_argument("--out", required=True, help="output .csv or binary file")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("design-filters", help="broadband FIR filter design")
    s.add_argument("scene")
    _add_solver_flags(s)
    s.add_argument("--fft-size", dest="fft_size", type=int)
    s.add_argument("--sample-rate", dest="sample_rate", type=float)
    s.add_argument("--alpha", type=float, help="differential penalty weight")
    s.add_argument("--delay", type=int, help="modeling delay in samples (default fft_size/2)")
    s.add_argument("--fmax", type=float, help="highest designed frequency in Hz")
    s.add_argument("--fade", type=int, default=0, help="raised-cosine edge fade in samples")
    s.add_argument("--out", required=True, help="output WAV")
    s.set_defaults(func=cmd_design_filters)

    s = sub.add_parser("evaluate", help="field and ILD metrics")
    s.add_argument("scene")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--signals")
    g.add_argument("--filters")
    s.add_argument("--metrics", default="synthesis_error,amplitude_error,amplitude_response,flatness")
    s.add_argument("--binaural", help=".npz ear transfer functions of the loudspeakers")
    s.add_argument("--binaural-ref", dest="binaural_ref", help=".npz ear transfer functions of the primary source")
    s.add_argument("--synthetic-binaural", action="store_true",
                   help="use the non-physical free-field ear pair (smoke tests)")
    s.add_argument("--compare-pm", action="store_true", help="also evaluate pressure matching and the deltas")
    s.add_argument("--point", type=_point, default=np.zeros(3), help="x,y,z for the amplitude response")
    s.add_argument("--band", type=_band, default=(2000.0, 8000.0), metavar="LO:HI")
    for k in ("beta", "beta_scale", "rho", "max_iters", "tol_primal", "tol_change", "gamma_ft", "gamma_sigma"):
        s.set_defaults(**{k: None})
    s.add_argument("--out", required=True, help="output prefix; writes .csv and .json")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", help="convolve a mono WAV with a filter bank")
    s.add_argument("filters")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.exit(EXIT_USAGE, f"sfsynth: error: {exc}\n")
    except (SceneError, SolverError, MetricError, ValueError, OSError) as exc:
        parser.exit(EXIT_USAGE, f"sfsynth: {type(exc).__name__}: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
