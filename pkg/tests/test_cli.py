import json
import subprocess
import sys

import numpy as np
import pytest
from scipy.io import wavfile

from sfsynth.broadband import filter_spectra, read_filterbank
from sfsynth.cli import main
from sfsynth.export import read_signals
from sfsynth.scene import Scene, load_scene, serialize_scene


@pytest.fixture
def scene_file(tmp_path, small_scene):
    path = tmp_path / "scene.yaml"
    path.write_text(serialize_scene(small_scene))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_make_scene_builds_experiment(tmp_path, experiment_scene):
    assert run("make-scene", "--out", tmp_path / "s.yaml") == 0
    assert load_scene(tmp_path / "s.yaml") == experiment_scene


def test_solve_pm_single(scene_file, tmp_path):
    out = tmp_path / "pm.csv"
    assert run("solve", scene_file, "--freq", 1000, "--method", "pm", "--out", out) == 0
    [sig] = read_signals(out)
    assert sig.frequency_hz == 1000.0 and sig.values.shape == (6,)
    diag = json.loads((tmp_path / "pm.csv.diag.json").read_text())
    assert diag[0]["gamma"] == 0.0
    manifest = json.loads((tmp_path / "pm.csv.manifest.json").read_text())
    assert manifest["method"] == "pm" and manifest["frequencies_hz"] == [1000.0]


def test_solve_combined_range(scene_file, tmp_path):
    out = tmp_path / "c.csv"
    code = run("solve", scene_file, "--freq-range", "100:8000:64", "--max-iters", 2000, "--out", out)
    sigs = read_signals(out)
    assert len(sigs) == 64
    gammas = [s.diagnostics.gamma for s in sigs]
    assert all(a <= b for a, b in zip(gammas, gammas[1:])) and gammas[0] < gammas[-1]
    diag = json.loads((tmp_path / "c.csv.diag.json").read_text())
    assert code == (0 if all(d["converged"] for d in diag) else 2)


def test_solve_not_converged_exit_code(scene_file, tmp_path):
    assert run("solve", scene_file, "--freq", 5000, "--max-iters", 1, "--out", tmp_path / "x.bin") == 2
    assert (tmp_path / "x.bin").exists()


def test_solve_cold_parallel_matches_serial(scene_file, tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    run("solve", scene_file, "--freq-range", "500:4000:5", "--no-warm-start", "--jobs", 1, "--out", a)
    run("solve", scene_file, "--freq-range", "500:4000:5", "--no-warm-start", "--jobs", 3, "--out", b)
    assert a.read_bytes() == b.read_bytes()


def test_solve_scene_defaults_override_builtin(tmp_path, small_scene):
    s = Scene(small_scene.loudspeakers, small_scene.control_points, small_scene.desired,
              solver_defaults={"gamma_ft": 500.0})
    path = tmp_path / "s.yaml"
    path.write_text(serialize_scene(s))
    run("solve", path, "--freq", 500, "--max-iters", 5, "--out", tmp_path / "o.csv")
    assert read_signals(tmp_path / "o.csv")[0].diagnostics.gamma == 0.5
    run("solve", path, "--freq", 500, "--gamma-ft", 2000, "--max-iters", 5, "--out", tmp_path / "p.csv")
    assert read_signals(tmp_path / "p.csv")[0].diagnostics.gamma < 0.01


@pytest.mark.parametrize("extra", [
    ["solve", "{scene}", "--freq", "1000", "--method", "pm", "--gamma-ft", "100", "--out", "{tmp}/x.csv"],
    ["solve", "{scene}", "--freq", "1000", "--freq-range", "1:2:2", "--out", "{tmp}/x.csv"],
    ["solve", "{scene}", "--freq-range", "5:1:3", "--out", "{tmp}/x.csv"],
    ["solve", "{tmp}/missing.yaml", "--freq", "1000", "--out", "{tmp}/x.csv"],
    ["design-filters", "{scene}", "--fft-size", "33", "--out", "{tmp}/f.wav"],
    ["evaluate", "{scene}", "--signals", "{tmp}/none.csv", "--metrics", "ild", "--out", "{tmp}/e"],
    ["evaluate", "{scene}", "--signals", "{tmp}/none.csv", "--metrics", "bogus", "--out", "{tmp}/e"],
])
def test_usage_errors_exit_1(scene_file, tmp_path, extra):
    argv = [a.format(scene=scene_file, tmp=tmp_path) for a in extra]
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


def test_design_filters_small(scene_file, tmp_path):
    out = tmp_path / "f.wav"
    assert run("design-filters", scene_file, "--fft-size", 32, "--sample-rate", 3200, "--fmax", 1500,
               "--alpha", 0.1, "--out", out) == 0
    rate, data = wavfile.read(out)
    assert rate == 3200 and data.shape == (32, 6) and data.dtype == np.float32
    meta = json.loads((tmp_path / "f.json").read_text())
    assert meta["num_bins"] == 15 and meta["alpha"] == 0.1 and meta["modeling_delay_samples"] == 16
    assert (tmp_path / "f.wav.manifest.json").exists()


def test_design_filters_alpha0_matches_solve(scene_file, tmp_path):
    # alpha = 0 decouples the bins; the filters then carry the per-bin PM solutions
    run("design-filters", scene_file, "--method", "pm", "--fft-size", 32, "--sample-rate", 3200,
        "--fmax", 1000, "--alpha", 0, "--out", tmp_path / "f.wav")
    run("solve", scene_file, "--method", "pm", "--freq-range", "100:1000:10", "--out", tmp_path / "s.csv")
    spec = filter_spectra(read_filterbank(tmp_path / "f.wav"))
    ref = np.stack([s.values for s in read_signals(tmp_path / "s.csv")])
    assert np.allclose(spec, ref, rtol=0, atol=2e-6 * np.abs(ref).max())


@pytest.mark.slow
def test_design_filters_experiment_defaults(tmp_path):
    run("make-scene", "--out", tmp_path / "s.yaml")
    assert run("design-filters", tmp_path / "s.yaml", "--max-iters", 20, "--out", tmp_path / "f.wav") == 0
    rate, data = wavfile.read(tmp_path / "f.wav")
    assert rate == 32000 and data.shape == (256, 32)
    assert json.loads((tmp_path / "f.json").read_text())["num_bins"] == 64


def test_evaluate_compare_pm(scene_file, tmp_path):
    run("solve", scene_file, "--freq-range", "1000:6000:6", "--max-iters", 500, "--out", tmp_path / "s.csv")
    assert run("evaluate", scene_file, "--signals", tmp_path / "s.csv", "--compare-pm",
               "--band", "1000:6000", "--out", tmp_path / "e") == 0
    summary = json.loads((tmp_path / "e.json").read_text())["results"]
    assert set(summary) == {"input", "pm", "delta_input_minus_pm"}
    d = summary["delta_input_minus_pm"]
    assert d["flatness_std_db"] == pytest.approx(summary["input"]["flatness_std_db"] - summary["pm"]["flatness_std_db"])
    header = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert header == "method,metric,position,frequency_hz,azimuth,value"


def test_evaluate_synthetic_ild(scene_file, tmp_path):
    run("solve", scene_file, "--freq-range", "500:2000:4", "--method", "pm", "--out", tmp_path / "s.csv")
    assert run("evaluate", scene_file, "--signals", tmp_path / "s.csv", "--metrics", "ild",
               "--synthetic-binaural", "--out", tmp_path / "e") == 0
    ne = json.loads((tmp_path / "e.json").read_text())["results"]["input"]["ild_normalized_error"]
    assert len(ne) == 1 and np.isfinite(ne[0])


def test_evaluate_filters_input(scene_file, tmp_path):
    run("design-filters", scene_file, "--fft-size", 32, "--sample-rate", 3200, "--fmax", 1000,
        "--out", tmp_path / "f.wav")
    assert run("evaluate", scene_file, "--filters", tmp_path / "f.wav", "--band", "100:1000",
               "--out", tmp_path / "e") == 0


def _filters(scene_file, tmp_path):
    run("design-filters", scene_file, "--fft-size", 32, "--sample-rate", 3200, "--fmax", 1500,
        "--out", tmp_path / "f.wav")
    return read_filterbank(tmp_path / "f.wav")


def test_render_impulse_returns_taps(scene_file, tmp_path):
    bank = _filters(scene_file, tmp_path)
    x = np.zeros(50, dtype=np.float32)
    x[0] = 1.0
    wavfile.write(tmp_path / "in.wav", 3200, x)
    assert run("render", tmp_path / "f.wav", tmp_path / "in.wav", "--out", tmp_path / "o.wav") == 0
    _, y = wavfile.read(tmp_path / "o.wav")
    assert y.shape == (50 + 31, 6)
    assert np.allclose(y[:32].T, bank.taps, atol=1e-6)
    assert np.allclose(y[32:], 0, atol=1e-6)


def test_render_zero_input(scene_file, tmp_path):
    _filters(scene_file, tmp_path)
    wavfile.write(tmp_path / "in.wav", 3200, np.zeros(40, dtype=np.float32))
    run("render", tmp_path / "f.wav", tmp_path / "in.wav", "--out", tmp_path / "o.wav")
    assert np.all(wavfile.read(tmp_path / "o.wav")[1] == 0)


def test_render_sine_steady_state_gain(scene_file, tmp_path):
    bank = _filters(scene_file, tmp_path)
    k, n = 3, 32
    t = np.arange(20 * n)
    wavfile.write(tmp_path / "in.wav", 3200, np.cos(2 * np.pi * k * t / n).astype(np.float32))
    run("render", tmp_path / "f.wav", tmp_path / "in.wav", "--out", tmp_path / "o.wav")
    y = wavfile.read(tmp_path / "o.wav")[1][n:len(t)].astype(float)
    # amplitude of the bin-k component over whole periods of the steady state
    amp = 2 * np.abs(np.fft.rfft(y, axis=0)[k * (len(y) // n)]) / len(y)
    gain = np.abs(np.fft.rfft(bank.taps, axis=1)[:, k])
    assert np.allclose(amp, gain, rtol=1e-4)


def test_render_rate_mismatch(scene_file, tmp_path):
    _filters(scene_file, tmp_path)
    wavfile.write(tmp_path / "in.wav", 8000, np.zeros(10, dtype=np.float32))
    with pytest.raises(SystemExit) as exc:
        run("render", tmp_path / "f.wav", tmp_path / "in.wav", "--out", tmp_path / "o.wav")
    assert exc.value.code == 1


def test_deterministic_outputs(scene_file, tmp_path):
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        for out in ("s.bin", "s.csv"):
            run("solve", scene_file, "--freq-range", "200:5000:8", "--max-iters", 100,
                "--out", tmp_path / name / out)
        run("design-filters", scene_file, "--fft-size", 32, "--sample-rate", 3200, "--fmax", 1500,
            "--out", tmp_path / name / "f.wav")
    for f in ("s.bin", "s.csv", "s.csv.diag.json", "f.wav", "f.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    for f in ("s.bin.manifest.json", "f.wav.manifest.json"):
        ma = json.loads((tmp_path / "a" / f).read_text())
        mb = json.loads((tmp_path / "b" / f).read_text())
        assert ma["manifest_hash"] == mb["manifest_hash"]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sfsynth.cli", "make-scene", "--out", str(tmp_path / "s.yaml")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "sfsynth.cli", "solve"], capture_output=True, text=True)
    assert proc.returncode == 1
