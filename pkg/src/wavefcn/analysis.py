"""Diagnostics for the fully connected output layer and for FCN locality."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import band_energy_ratio
from .models import (FRAME_LEN, Arch, Model, ModelSpec, TrainingConfig, build, enhance_waveform,
                     filter_mode_apply, final_dense, train)
from .signal import WHITE, NoiseKind, Waveform, frame, gen_signal, mix_at_snr
from .spectral import stft


@dataclass(frozen=True)
class CorrelationMatrix:
    values: np.ndarray
    degenerate_rows: tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return self.values.shape[0]


def weight_correlation(weights) -> CorrelationMatrix:
    """Pearson correlation between the rows of a weight matrix.

    Row i holds the weights feeding output node i. Rows with zero centred
    norm are reported in ``degenerate_rows``; their off-diagonal entries are
    NaN.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D weight matrix, got shape {w.shape}")
    centred = w - w.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centred, axis=1)
    bad = norms == 0.0
    unit = np.zeros_like(centred)
    unit[~bad] = centred[~bad] / norms[~bad, None]
    c = unit @ unit.T
    c = np.clip(0.5 * (c + c.T), -1.0, 1.0)
    c[bad, :] = np.nan
    c[:, bad] = np.nan
    np.fill_diagonal(c, 1.0)
    return CorrelationMatrix(c, tuple(int(i) for i in np.flatnonzero(bad)))


def neighbor_profile(corr: CorrelationMatrix, offset: int) -> float:
    """Mean of C[i, i + offset] over all valid i."""
    if not 0 <= offset < corr.size:
        raise ValueError(f"offset must be in [0, {corr.size}), got {offset}")
    return float(np.nanmean(np.diagonal(corr.values, offset)))


def receptive_field(model: Model, output_index: int, delta: float = 1.0,
                    base: np.ndarray | None = None) -> tuple[int, int]:
    """Input positions whose +delta perturbation changes output ``output_index``.

    Measured on one frame (zeros unless ``base`` is given) in inference mode;
    returns (min, max) of the affected positions, or (-1, -1) if none.
    """
    dim = model.spec.input_dim
    if not 0 <= output_index < dim:
        raise ValueError(f"output index {output_index} outside [0, {dim})")
    x0 = np.zeros(dim) if base is None else np.asarray(base, dtype=np.float64)
    ref = model.predict(np.stack([x0, x0]))[0, output_index]
    hit = []
    chunk = 64
    for start in range(0, dim, chunk):
        pos = np.arange(start, min(start + chunk, dim))
        batch = np.repeat(x0[None, :], pos.size, axis=0)
        batch[np.arange(pos.size), pos] += delta
        if pos.size == 1:
            batch = np.concatenate([batch, x0[None, :]])
        out = model.predict(batch)[: pos.size, output_index]
        hit.extend(pos[out != ref].tolist())
    if not hit:
        return (-1, -1)
    return (min(hit), max(hit))


# ------------------------------------------------------------------ hf probe

PROBE_KINDS = ("wave-dnn-l512", "wave-dnn-l1", "wave-fcn")
PROBE_SNR_DB = 6.0
PROBE_FRAMES = 16
PROBE_BATCH = 16
PROBE_EPOCHS = 300
PROBE_SAMPLE_RATE = 16000


@dataclass
class ProbeReport:
    kind: str
    train_freq_hz: float
    epochs: int
    seed: int
    final_mse: float
    band_ratio: float
    cutoff_hz: float
    train_loss: list[float] = field(default_factory=list)
    freqs: np.ndarray = field(default=None, repr=False)
    clean_power: np.ndarray = field(default=None, repr=False)
    output_power: np.ndarray = field(default=None, repr=False)


def probe_pair(train_freq_hz: float, seed: int, split: int, frames: int = PROBE_FRAMES,
               sample_rate: int = PROBE_SAMPLE_RATE) -> tuple[Waveform, Waveform]:
    """(clean tone, tone + white noise at 6 dB) for a given seed and split (0 train, 1 test)."""
    n = frames * FRAME_LEN
    clean = gen_signal(NoiseKind("tone", train_freq_hz), n, sample_rate, seed * 2 + split)
    noise = gen_signal(WHITE, n, sample_rate, 10_000 + seed * 2 + split)
    noisy, _ = mix_at_snr(clean, noise, PROBE_SNR_DB)
    return clean, noisy


def _mean_power_spectrum(wave: Waveform) -> np.ndarray:
    return np.mean(np.abs(stft(wave).coeffs) ** 2, axis=0)


def hf_probe(kind: str, train_freq_hz: float = 6000.0, epochs: int = PROBE_EPOCHS, seed: int = 0,
             sample_rate: int = PROBE_SAMPLE_RATE, model: Model | None = None) -> ProbeReport:
    """Train a waveform model to denoise a high-frequency tone and measure its output band energy.

    ``wave-dnn-l512`` and ``wave-fcn`` are applied frame by frame without
    overlap; ``wave-dnn-l1`` is a DNN trained on shift-1 windows and applied
    in filter mode.
    The band ratio is measured above ``train_freq_hz - 500`` on a held-out
    signal. A pre-trained ``model`` skips training.
    """
    if kind not in PROBE_KINDS:
        raise ValueError(f"unknown probe kind {kind!r}; expected one of {', '.join(PROBE_KINDS)}")
    nyq = sample_rate / 2.0
    if not 500.0 < train_freq_hz < nyq:
        raise ValueError(f"train frequency {train_freq_hz:g} Hz must lie in (500, {nyq:g}) Hz")
    history: list[float] = []
    if model is None:
        model, history = probe_model(kind, train_freq_hz, epochs, seed, sample_rate)

    clean, noisy = probe_pair(train_freq_hz, seed, 1, sample_rate=sample_rate)
    if kind == "wave-dnn-l1":
        out = filter_mode_apply(model, noisy)
    else:
        out = enhance_waveform(model, noisy, FRAME_LEN)
    cutoff = train_freq_hz - 500.0
    err = out.samples - clean.samples
    return ProbeReport(
        kind=kind, train_freq_hz=train_freq_hz, epochs=epochs, seed=seed,
        final_mse=float(np.mean(err * err)),
        band_ratio=band_energy_ratio(out, cutoff), cutoff_hz=cutoff, train_loss=history,
        freqs=np.fft.rfftfreq(512, 1.0 / sample_rate),
        clean_power=_mean_power_spectrum(clean), output_power=_mean_power_spectrum(out),
    )


def probe_model(kind: str, train_freq_hz: float, epochs: int, seed: int,
                sample_rate: int = PROBE_SAMPLE_RATE) -> tuple[Model, list[float]]:
    """Train the network behind a probe kind on the seed's training tone.

    Every kind gets the same budget: ``epochs`` steps over PROBE_FRAMES
    frames. ``wave-dnn-l1`` is fed windows cut with shift 1 (a fresh draw of
    PROBE_FRAMES windows per epoch); the other kinds see the PROBE_FRAMES
    non-overlapping frames.
    """
    arch = Arch.WAVE_FCN if kind == "wave-fcn" else Arch.WAVE_DNN
    model = build(ModelSpec(arch, seed=seed))
    clean, noisy = probe_pair(train_freq_hz, seed, 0, sample_rate=sample_rate)
    shift = 1 if kind == "wave-dnn-l1" else FRAME_LEN
    cfg = TrainingConfig(epochs=epochs, batch_size=PROBE_BATCH, learning_rate=1e-3, seed=seed,
                         validation_fraction=0.0, samples_per_epoch=PROBE_FRAMES)
    history = train(model, frame(noisy, FRAME_LEN, shift).frames,
                    frame(clean, FRAME_LEN, shift).frames, cfg).train
    return model, history


def run_probe_set(kinds, train_freq_hz: float = 6000.0, epochs: int = PROBE_EPOCHS,
                  seed: int = 0) -> list[ProbeReport]:
    """Run several probe kinds for one seed."""
    reports = []
    for kind in kinds:
        model, history = probe_model(kind, train_freq_hz, epochs, seed)
        rep = hf_probe(kind, train_freq_hz, epochs, seed, model=model)
        rep.train_loss = history
        reports.append(rep)
    return reports


def write_probe_spectra(report: ProbeReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_hz", "clean_power", "output_power"])
        for f, c, o in zip(report.freqs, report.clean_power, report.output_power):
            w.writerow([f"{f:g}", repr(float(c)), repr(float(o))])


def correlation_exports(corr: CorrelationMatrix, out_dir) -> None:
    """Heatmap of C as CSV and PGM (values -1..1 mapped to 0..255)."""
    from .spectral import grid_to_pgm, write_csv_grid, write_pgm

    out_dir = Path(out_dir)
    write_csv_grid(out_dir / "correlation.csv", corr.values)
    write_pgm(out_dir / "correlation.pgm", grid_to_pgm(np.nan_to_num(corr.values), -1.0, 1.0))
