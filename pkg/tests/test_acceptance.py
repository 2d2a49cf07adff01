"""Acceptance criteria 1-10, one test per criterion.

A summary line per criterion is printed at the end of the session (see
conftest.py). Criteria 6, 9 and 10 train real models and take minutes.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from wavefcn import nn
from wavefcn.analysis import PROBE_KINDS, neighbor_profile, probe_pair, receptive_field, run_probe_set, weight_correlation
from wavefcn.metrics import band_energy_ratio, stoi
from wavefcn.models import Arch, Model, ModelSpec, build, enhance_lps, filter_mode_apply, load_model, param_count
from wavefcn.signal import (ENGINE, PINK, WHITE, Waveform, frame, gen_signal, gen_speech_like, mix_at_snr, read_wav,
                            reconstruct, write_wav)
from wavefcn.spectral import istft, stft

SR = 16000

# High-frequency probe thresholds. Fixed from scripts/calibrate_hf_probe.py
# (seeds 0-9, 300 epochs). Calibrated wave-fcn band ratios:
CALIBRATED_FCN_RATIOS = [0.99190, 0.99258, 0.98914, 0.99419, 0.98983, 0.98982, 0.99136, 0.98478, 0.98968, 0.99073]
# the clean test tone itself scores ~1.0; the threshold sits below the
# calibrated minimum (0.98478) with room for BLAS rounding across machines
FCN_RATIO_THRESHOLD = 0.95
PROBE_SEEDS = range(10)


def param(values, name="p"):
    return nn.Parameter(np.asarray(values, dtype=np.float64), name)


# ------------------------------------------------------------------ 1


def _grad_errors(seed):
    rng = np.random.default_rng(seed)
    errs = {}

    b, i, o = rng.integers(1, 5), rng.integers(1, 7), rng.integers(1, 6)
    x = nn.Tensor(rng.standard_normal((b, i)), requires_grad=True)
    w, bias = param(rng.standard_normal((o, i))), param(rng.standard_normal(o))
    errs["dense"] = nn.grad_check(lambda: nn.dense(x, w, bias), [x, w, bias], seed=seed)

    k = int(rng.choice([1, 3, 5, 7]))
    padding = "same" if seed % 2 == 0 else "valid"
    n, c, oc, length = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), rng.integers(k, 13)
    xc = nn.Tensor(rng.standard_normal((n, c, length)), requires_grad=True)
    f, fb = param(rng.standard_normal((oc, c, k))), param(rng.standard_normal(oc))
    errs["conv1d"] = nn.grad_check(lambda: nn.conv1d(xc, f, fb, padding), [xc, f, fb], seed=seed)

    # PReLU away from its kink: |x| >= 0.05 while the probe step is 1e-4
    shape = (rng.integers(1, 5), rng.integers(1, 5))
    xp = nn.Tensor(rng.uniform(0.05, 2.0, shape) * rng.choice([-1.0, 1.0], shape), requires_grad=True)
    slope = param(rng.uniform(0.0, 0.5, shape[1]))
    errs["prelu"] = nn.grad_check(lambda: nn.prelu(xp, slope), [xp, slope], seed=seed)

    feats = rng.integers(1, 5)
    xb_shape = (rng.integers(2, 6), feats) if seed % 3 else (rng.integers(2, 4), feats, rng.integers(2, 6))
    xb = nn.Tensor(rng.standard_normal(xb_shape), requires_grad=True)
    g, be = param(rng.uniform(0.5, 2.0, feats)), param(rng.standard_normal(feats))
    state = nn.BatchNormState(rng.standard_normal(feats), rng.uniform(0.5, 2.0, feats))
    frozen = lambda: nn.batchnorm(xb, g, be, state, training=False)  # noqa: E731
    batch = lambda: nn.batchnorm(xb, g, be, state, training=True, update_stats=False)  # noqa: E731
    errs["batchnorm"] = max(nn.grad_check(frozen, [xb, g, be], seed=seed),
                            nn.grad_check(batch, [xb, g, be], seed=seed))

    pred = nn.Tensor(rng.standard_normal((rng.integers(1, 5), rng.integers(1, 6))), requires_grad=True)
    target = rng.standard_normal(pred.shape)
    errs["mse"] = nn.grad_check(lambda: nn.mse_loss(pred, target), [pred], seed=seed)
    return errs


def test_criterion_01_gradient_correctness():
    start = time.perf_counter()
    worst = {}
    for seed in range(100):
        for layer, err in _grad_errors(seed).items():
            worst[layer] = max(worst.get(layer, 0.0), err)
    elapsed = time.perf_counter() - start
    print(f"worst relative errors: {worst}; {elapsed:.1f}s")
    for layer, err in worst.items():
        assert err <= (1e-3 if layer == "batchnorm" else 1e-4), layer
    assert elapsed < 60


# ------------------------------------------------------------------ 2


def test_criterion_02_parameter_count_ratio():
    sizes = [512] + [1024] * 4 + [512]
    dense_core = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    conv_core = (1 * 15 * 11 + 15) + 4 * (15 * 15 * 11 + 15) + (15 * 11 + 1)
    assert dense_core == 4_198_912 and conv_core == 10_306

    dnn, cnn, fcn = (build(ModelSpec(a)) for a in (Arch.WAVE_DNN, Arch.WAVE_CNN, Arch.WAVE_FCN))
    # batch norm (gamma, beta) and PReLU slopes on top of the cores
    assert param_count(dnn) == dense_core + 4 * 2 * 1024 + 4
    assert param_count(fcn) == conv_core + 5 * 2 * 15 + 5 * 15
    for big in (dnn, cnn):
        assert 0.001 <= param_count(fcn) / param_count(big) <= 0.005


# ------------------------------------------------------------------ 3


def test_criterion_03_weight_correlation():
    rng = np.random.default_rng(0)
    for _ in range(50):
        w = rng.standard_normal((rng.integers(2, 40), rng.integers(2, 60))) * rng.uniform(0.01, 10)
        c = weight_correlation(w).values
        assert np.max(np.abs(c - c.T)) <= 1e-12
        assert np.max(np.abs(np.diag(c) - 1.0)) <= 1e-12
        assert np.all(c >= -1.0 - 1e-12) and np.all(c <= 1.0 + 1e-12)

    anti = weight_correlation([[1.0, 2.0, 3.0, 4.0], [4.0, 3.0, 2.0, 1.0]]).values
    assert abs(anti[0, 1] + 1.0) <= 1e-10
    row = rng.standard_normal(32)
    affine = weight_correlation(np.stack([row, 3.5 * row - 2.0, 0.1 * row + 9.0])).values
    assert np.max(np.abs(affine - 1.0)) <= 1e-10
    assert abs(neighbor_profile(weight_correlation(np.stack([row, row, row])), 1) - 1.0) <= 1e-10


# ------------------------------------------------------------------ 4


def test_criterion_04_receptive_field():
    base = np.random.default_rng(4).standard_normal(512) * 0.3
    for depth in range(1, 7):
        model = build(ModelSpec(Arch.WAVE_FCN, seed=depth, fcn_depth=depth))
        # every input outside [lo, hi] leaves the output bitwise unchanged
        lo, hi = receptive_field(model, 256, base=base)
        assert (lo, hi) == (256 - 5 * depth, 256 + 5 * depth)
        assert hi - lo + 1 == 10 * depth + 1
    fcn = build(ModelSpec(Arch.WAVE_FCN, seed=9))
    assert hi - lo + 1 <= 61
    assert receptive_field(fcn, 0, base=base) == (0, 30)
    assert receptive_field(fcn, 511, base=base) == (481, 511)
    dnn = build(ModelSpec(Arch.WAVE_DNN, seed=9))
    for index in (0, 256, 511):
        assert receptive_field(dnn, index, base=base) == (0, 511)


# ------------------------------------------------------------------ 5


def test_criterion_05_filter_mode_equivalence():
    rng = np.random.default_rng(5)
    models = [build(ModelSpec(Arch.WAVE_DNN, seed=s)) for s in (0, 1)]
    for trial in range(20):
        model = models[trial % 2]
        n = int(rng.integers(600, 900))
        s = int(rng.integers(1, 200))
        x = gen_speech_like(n, SR, 50 + trial).samples + 0.05 * rng.standard_normal(n)
        prefix = 0.3 * rng.standard_normal(s)
        y = filter_mode_apply(model, Waveform(SR, x)).samples
        y_shift = filter_mode_apply(model, Waveform(SR, np.concatenate([prefix, x]))).samples
        interior = n - 512 + 1
        # output t reads samples [t, t + 512): interior outputs move with the input
        assert y_shift[s:s + interior].tobytes() == y[:interior].tobytes()

        p = int(rng.integers(0, n))
        bumped = x.copy()
        bumped[p] += 0.5
        z = filter_mode_apply(model, Waveform(SR, bumped)).samples
        t = np.arange(interior)
        inside = (t <= p) & (p < t + 512)
        assert z[:interior][~inside].tobytes() == y[:interior][~inside].tobytes()
        assert np.all(z[:interior][inside] != y[:interior][inside])


# ------------------------------------------------------------------ 6


def test_criterion_06_high_frequency_probe():
    start = time.perf_counter()
    ratios = {k: [] for k in PROBE_KINDS}
    for seed in PROBE_SEEDS:
        for rep in run_probe_set(PROBE_KINDS, 6000.0, seed=seed):
            ratios[rep.kind].append(rep.band_ratio)
    elapsed = time.perf_counter() - start
    fcn, l512, l1 = ratios["wave-fcn"], ratios["wave-dnn-l512"], ratios["wave-dnn-l1"]
    print(f"fcn {np.round(fcn, 4)}\nl512 {np.round(l512, 4)}\nl1 {np.round(l1, 4)}\n{elapsed:.0f}s")

    oracle = band_energy_ratio(probe_pair(6000.0, 0, 1)[0], 5500.0)
    assert oracle > 0.99 and FCN_RATIO_THRESHOLD < min(CALIBRATED_FCN_RATIOS)
    assert all(r > FCN_RATIO_THRESHOLD for r in fcn)
    assert sum(a < b for a, b in zip(l512, fcn)) >= 9
    assert all(f / 2 <= a <= 2 * f for a, f in zip(l1, fcn))
    assert elapsed < 15 * 60


# ------------------------------------------------------------------ 7


def test_criterion_07_stoi_validity():
    start = time.perf_counter()
    snrs = [12, 6, 0, -6, -12]
    for u in range(10):
        clean = gen_speech_like(int(1.5 * SR), SR, 700 + u)
        assert abs(stoi(clean, clean) - 1.0) <= 1e-10
        for ni, kind in enumerate((WHITE, PINK, ENGINE)):
            noise = gen_signal(kind, len(clean), SR, 900 + 10 * u + ni)
            scores = []
            for snr in snrs:
                noisy, _ = mix_at_snr(clean, noise, snr)
                scores.append(stoi(clean, noisy))
                if snr == 0:
                    assert stoi(clean, noisy.with_samples(-noisy.samples)) == pytest.approx(scores[-1], abs=1e-12)
            assert all(a > b for a, b in zip(scores, scores[1:])), (u, kind.label, scores)
    assert time.perf_counter() - start < 120


# ------------------------------------------------------------------ 8


def test_criterion_08_pipeline_identities(tmp_path):
    rng = np.random.default_rng(8)
    for m, shift, n in [(512, 512, 5000), (512, 1, 1500), (512, 256, 4096), (64, 7, 999), (48, 32, 700)]:
        x = Waveform(SR, rng.standard_normal(n))
        back = reconstruct(frame(x, m, shift)).samples
        covered = (n - m) // shift * shift + m
        assert back[:covered].tobytes() == x.samples[:covered].tobytes()
        assert np.all(back[covered:] == 0)

    for n in (512, 777, 8000, 16001):
        x = Waveform(SR, rng.standard_normal(n) * 0.3)
        assert np.sqrt(np.mean((istft(stft(x)).samples - x.samples) ** 2)) <= 1e-10

    passthrough = Model(ModelSpec(Arch.LPS_DNN), [])
    speech = gen_speech_like(8000, SR, 8)
    assert np.sqrt(np.mean((enhance_lps(passthrough, speech).samples - speech.samples) ** 2)) <= 1e-6

    samples = rng.uniform(-1.0, 1.0 - 1 / 32768, 4000)
    write_wav(tmp_path / "x.wav", Waveform(SR, samples))
    assert np.max(np.abs(read_wav(tmp_path / "x.wav").samples - samples)) <= 1 / 32768


# ------------------------------------------------------------------ 9, 10


ARCHS = ["wave-dnn", "wave-cnn", "wave-fcn", "lps-dnn"]


def cli(cwd, *args):
    env = {**os.environ, "WAVEFCN_THREADS": "1"}
    proc = subprocess.run([sys.executable, "-m", "wavefcn", *args], cwd=cwd, env=env,
                          capture_output=True, text=True)
    assert proc.returncode == 0, (args, proc.stderr)
    return proc


def pipeline(root, utterances, epochs, noises, snrs):
    root.mkdir(parents=True, exist_ok=True)
    cli(root, "synth", "--out-dir", "corpus", "--num-utterances", str(utterances), "--noises", noises,
        f"--snrs={snrs}", "--seed", "1")
    for arch in ARCHS:
        cli(root, "train", "--corpus", "corpus", "--arch", arch, "--out-dir", f"models/{arch}",
            "--epochs", str(epochs), "--seed", "1")
        cli(root, "enhance", "--checkpoint", f"models/{arch}/model.wfcn", "--input", "corpus/noisy",
            "--out-dir", f"enhanced/{arch}")
        cli(root, "evaluate", "--clean", "corpus/clean", "--noisy", "corpus/noisy",
            "--enhanced", f"enhanced/{arch}", "--out", f"reports/{arch}.csv")


def test_criterion_09_end_to_end(tmp_path):
    start = time.perf_counter()
    root = tmp_path / "run"
    pipeline(root, 20, 5, "white,pink", "-6,6")
    noisy = sorted((root / "corpus" / "noisy").rglob("*.wav"))
    assert len(noisy) == 80 and len(list((root / "corpus" / "clean").glob("*.wav"))) == 20
    for arch in ARCHS:
        model = load_model(root / "models" / arch / "model.wfcn")
        assert model.spec.tag == arch
        rows = (root / "models" / arch / "history.csv").read_text().splitlines()[1:]
        assert len(rows) == 5
        losses = [float(r.split(",")[1]) for r in rows]
        assert losses[4] < losses[0], (arch, losses)
        for f in noisy:
            out = read_wav(root / "enhanced" / arch / f.relative_to(root / "corpus" / "noisy"))
            assert len(out) == len(read_wav(f))
        report = (root / "reports" / f"{arch}.csv").read_text().splitlines()
        assert len(report) == 81
        summary = (root / "reports" / f"{arch}_summary.csv").read_text().splitlines()
        labels = [line.split(",")[0] for line in summary[1:]]
        assert labels[-1] == "avg" and [float(v) for v in labels[:-1]] == [-6.0, 6.0]
    assert time.perf_counter() - start < 20 * 60


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(tmp_path):
    pipeline(tmp_path / "a", 4, 2, "white", "0")
    pipeline(tmp_path / "b", 4, 2, "white", "0")
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert sorted(a) == sorted(b)
    kinds = {Path(k).suffix for k in a}
    assert {".wfcn", ".csv", ".wav"} <= kinds
    differing = [k for k in a if a[k] != b[k]]
    assert differing == []
