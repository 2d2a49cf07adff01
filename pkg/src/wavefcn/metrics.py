"""Objective evaluation: STOI, MSE, output SNR, high-band energy ratio, reports."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .signal import Waveform, measure_snr, read_wav, resample
from .spectral import stft

# STOI constants (Taal et al., 2011)
STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_HOP = 128
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps

HIBAND_CUTOFF_HZ = 4000.0

REPORT_HEADER = ["file", "noise", "snr_db", "stoi_noisy", "stoi_enhanced", "mse", "output_snr_db",
                 "hiband_clean", "hiband_noisy", "hiband_enhanced"]


def third_octave_bands(fs: int = STOI_FS, nfft: int = STOI_NFFT, num_bands: int = STOI_BANDS,
                       min_freq: float = STOI_MIN_FREQ) -> tuple[np.ndarray, np.ndarray]:
    """Binary one-third-octave band matrix (bands x bins) and band centre frequencies."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands, dtype=np.float64)
    centres = min_freq * 2.0 ** (k / 3.0)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((num_bands, f.size))
    for i in range(num_bands):
        lo_bin = int(np.argmin((f - lo[i]) ** 2))
        hi_bin = int(np.argmin((f - hi[i]) ** 2))
        obm[i, lo_bin:hi_bin] = 1.0
    return obm, centres


def _stoi_window() -> np.ndarray:
    return np.hanning(STOI_FRAME + 2)[1:-1]


def _frames(x: np.ndarray, framelen: int, hop: int) -> np.ndarray:
    # frame starts run over [0, len - framelen), as in the reference algorithm
    count = 0 if x.size <= framelen else -(-(x.size - framelen) // hop)
    idx = np.arange(count)[:, None] * hop + np.arange(framelen)[None, :]
    return x[idx]


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    count, framelen = frames.shape
    out = np.zeros((count - 1) * hop + framelen) if count else np.zeros(0)
    for i in range(count):
        out[i * hop:i * hop + framelen] += frames[i]
    return out


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float = STOI_DYN_RANGE,
                         framelen: int = STOI_FRAME, hop: int = STOI_HOP):
    """Drop frames whose clean energy is more than ``dyn_range`` dB below the loudest."""
    w = _stoi_window()
    xf = _frames(x, framelen, hop) * w
    yf = _frames(y, framelen, hop) * w
    if xf.shape[0] == 0:
        return np.zeros(0), np.zeros(0)
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > np.max(energy) - dyn_range
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _stoi_spectrum(x: np.ndarray) -> np.ndarray:
    frames = _frames(x, STOI_FRAME, STOI_HOP) * _stoi_window()
    return np.fft.rfft(frames, n=STOI_NFFT, axis=1).T  # (bins, frames)


def stoi(clean: Waveform, degraded: Waveform) -> float:
    """Short-time objective intelligibility of ``degraded`` against ``clean``.

    Both signals are resampled to 10 kHz, silent frames (by clean energy)
    removed, and one-third-octave envelopes over 30-frame segments compared
    by correlation after normalization and clipping at -15 dB SDR.
    """
    if len(clean) != len(degraded):
        raise ValueError(f"length mismatch: {len(clean)} vs {len(degraded)}")
    if clean.sample_rate != degraded.sample_rate:
        raise ValueError(f"sample-rate mismatch: {clean.sample_rate} vs {degraded.sample_rate}")
    x = resample(clean, STOI_FS).samples
    y = resample(degraded, STOI_FS).samples
    if not np.any(x):
        raise ValueError("clean signal is silent")
    x, y = remove_silent_frames(x, y)

    obm, _ = third_octave_bands()
    x_tob = np.sqrt(obm @ np.abs(_stoi_spectrum(x)) ** 2)
    y_tob = np.sqrt(obm @ np.abs(_stoi_spectrum(y)) ** 2)
    n_frames = x_tob.shape[1]
    if n_frames < STOI_SEGMENT:
        raise ValueError(f"signal too short for STOI: {n_frames} frames after silence removal, "
                         f"need {STOI_SEGMENT}")

    # segments[m] covers frames [m, m + 30)
    idx = np.arange(n_frames - STOI_SEGMENT + 1)[:, None] + np.arange(STOI_SEGMENT)[None, :]
    xs = x_tob[:, idx].transpose(1, 0, 2)  # (segments, bands, 30)
    ys = y_tob[:, idx].transpose(1, 0, 2)
    alpha = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + _EPS)
    clip = 10.0 ** (-STOI_BETA / 20.0)
    yp = np.minimum(ys * alpha, xs * (1.0 + clip))
    xc = xs - xs.mean(axis=2, keepdims=True)
    yc = yp - yp.mean(axis=2, keepdims=True)
    xc /= np.linalg.norm(xc, axis=2, keepdims=True) + _EPS
    yc /= np.linalg.norm(yc, axis=2, keepdims=True) + _EPS
    return float(np.mean(np.sum(xc * yc, axis=2)))


def band_energy_ratio(wave: Waveform, cutoff_hz: float) -> float:
    """Fraction of STFT power above ``cutoff_hz``, averaged over non-silent frames."""
    nyq = wave.sample_rate / 2.0
    if not 0.0 < cutoff_hz < nyq:
        raise ValueError(f"cutoff {cutoff_hz:g} Hz outside (0, {nyq:g}) Hz")
    spec = stft(wave)
    p = np.abs(spec.coeffs) ** 2
    freqs = np.arange(p.shape[1]) * wave.sample_rate / spec.n_fft
    total = p.sum(axis=1)
    live = total > 0
    if not np.any(live):
        raise ValueError("zero-energy signal has no band energy ratio")
    high = p[:, freqs > cutoff_hz].sum(axis=1)
    return float(np.mean(high[live] / total[live]))


def mse(a: Waveform, b: Waveform) -> float:
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    d = a.samples - b.samples
    return float(np.mean(d * d)) if d.size else 0.0


# ----------------------------------------------------------------------- report


@dataclass
class UtteranceResult:
    file: str
    noise: str
    snr_db: float
    stoi_noisy: float
    stoi_enhanced: float
    mse: float
    output_snr_db: float
    hiband_clean: float
    hiband_noisy: float
    hiband_enhanced: float
    pesq: float | None = None


METRIC_FIELDS = REPORT_HEADER[3:]


@dataclass
class EvaluationReport:
    records: list[UtteranceResult] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    per_snr: dict[float, dict[str, float]] = field(default_factory=dict)
    overall: dict[str, float] = field(default_factory=dict)


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else float("nan")


def aggregate(records: list[UtteranceResult]) -> tuple[dict, dict]:
    """Arithmetic means per input-SNR level and overall, in a fixed order."""
    records = sorted(records, key=lambda r: r.file)
    fields = list(METRIC_FIELDS) + (["pesq"] if any(r.pesq is not None for r in records) else [])
    per_snr: dict[float, dict[str, float]] = {}
    for snr in sorted({r.snr_db for r in records if not math.isnan(r.snr_db)}):
        group = [r for r in records if r.snr_db == snr]
        per_snr[snr] = {f: _mean(getattr(r, f) for r in group) for f in fields}
    overall = {f: _mean(getattr(r, f) for r in records) for f in fields}
    return per_snr, overall


def _safe(fn, *args) -> float:
    try:
        return fn(*args)
    except ValueError:
        return float("nan")


def evaluate_triplet(name: str, noise: str, snr_db: float, clean: Waveform, noisy: Waveform,
                     enhanced: Waveform, cutoff_hz: float = HIBAND_CUTOFF_HZ) -> UtteranceResult:
    return UtteranceResult(
        file=name, noise=noise, snr_db=snr_db,
        stoi_noisy=_safe(stoi, clean, noisy),
        stoi_enhanced=_safe(stoi, clean, enhanced),
        mse=mse(clean, enhanced),
        output_snr_db=measure_snr(clean, enhanced),
        hiband_clean=_safe(band_energy_ratio, clean, cutoff_hz),
        hiband_noisy=_safe(band_energy_ratio, noisy, cutoff_hz),
        hiband_enhanced=_safe(band_energy_ratio, enhanced, cutoff_hz),
    )


def _condition(rel: Path) -> tuple[str, float]:
    parts = rel.parts
    if len(parts) >= 3:
        try:
            return parts[-3], float(parts[-2])
        except ValueError:
            pass
    return "", float("nan")


def load_pesq_csv(path) -> dict[str, float]:
    """External PESQ scores: a CSV with ``file`` and ``pesq`` columns."""
    with open(path, newline="") as fh:
        return {row["file"]: float(row["pesq"]) for row in csv.DictReader(fh)}


def evaluate(clean_dir, degraded_dir, enhanced_dir, pesq_csv=None,
             cutoff_hz: float = HIBAND_CUTOFF_HZ, threads: int | None = None) -> EvaluationReport:
    """Score every WAV under ``degraded_dir`` against its clean and enhanced counterparts.

    Degraded files are matched to ``clean_dir/<basename>`` and
    ``enhanced_dir/<relative path>``. Noise kind and input SNR are read from a
    ``<noise>/<snr>/<file>`` layout when present. Files lacking a counterpart
    are listed in ``report.missing`` and skipped.
    """
    clean_dir, degraded_dir, enhanced_dir = Path(clean_dir), Path(degraded_dir), Path(enhanced_dir)
    if not degraded_dir.is_dir():
        raise FileNotFoundError(f"no such directory: {degraded_dir}")
    rels = sorted(p.relative_to(degraded_dir) for p in degraded_dir.rglob("*.wav"))
    pesq = load_pesq_csv(pesq_csv) if pesq_csv else {}
    report = EvaluationReport()
    jobs = []
    for rel in rels:
        clean_path = clean_dir / rel.name
        enh_path = enhanced_dir / rel
        absent = [str(p) for p in (clean_path, enh_path) if not p.exists()]
        if absent:
            report.missing.extend(absent)
            continue
        jobs.append((rel, clean_path, enh_path))

    def run(job):
        rel, clean_path, enh_path = job
        noise, snr = _condition(rel)
        rec = evaluate_triplet(rel.as_posix(), noise, snr, read_wav(clean_path),
                               read_wav(degraded_dir / rel), read_wav(enh_path), cutoff_hz)
        rec.pesq = pesq.get(rel.as_posix())
        return rec

    threads = threads or int(os.environ.get("WAVEFCN_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            report.records = list(pool.map(run, jobs))
    else:
        report.records = [run(j) for j in jobs]
    report.records.sort(key=lambda r: r.file)
    report.per_snr, report.overall = aggregate(report.records)
    return report


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_report_csv(report: EvaluationReport, path) -> None:
    """Per-file rows with the fixed header (plus ``pesq`` when scores were supplied)."""
    with_pesq = any(r.pesq is not None for r in report.records)
    header = REPORT_HEADER + (["pesq"] if with_pesq else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in report.records:
            row = asdict(r)
            w.writerow([_fmt(row[h]) for h in header])


def write_summary_csv(report: EvaluationReport, path) -> None:
    fields = list(report.overall)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["snr_db"] + fields)
        for snr, vals in report.per_snr.items():
            w.writerow([_fmt(snr)] + [_fmt(vals[f]) for f in fields])
        w.writerow(["avg"] + [_fmt(report.overall[f]) for f in fields])


def read_report_csv(path) -> list[UtteranceResult]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {k: (v if k in ("file", "noise") else float(v)) for k, v in row.items() if k != "pesq"}
            pesq = row.get("pesq")
            out.append(UtteranceResult(**vals, pesq=float(pesq) if pesq else None))
    return out
