"""Waveforms, WAV I/O, framing, SNR mixing, resampling and synthetic signals."""

from __future__ import annotations

import math
import wave as _wave
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sps

PCM_SCALE = 32768.0


@dataclass(frozen=True)
class Waveform:
    sample_rate: int
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform samples must be finite")
        samples.flags.writeable = False
        object.__setattr__(self, "sample_rate", int(self.sample_rate))
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "Waveform":
        return Waveform(self.sample_rate, samples)


@dataclass(frozen=True)
class FrameSet:
    """Frames of ``frame_len`` samples taken every ``shift`` samples.

    The tail that does not fill a whole frame is not framed; ``source_len``
    keeps the original length so reconstruction can restore it as zeros.
    """

    frames: np.ndarray = field(repr=False)
    frame_len: int
    shift: int
    source_len: int
    sample_rate: int

    def __post_init__(self):
        if not 1 <= self.shift <= self.frame_len:
            raise ValueError(f"shift must satisfy 1 <= L <= M, got L={self.shift}, M={self.frame_len}")
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.frame_len:
            frames = frames.reshape(-1, self.frame_len)
        if frames.shape[0] != num_frames(self.source_len, self.frame_len, self.shift):
            raise ValueError(
                f"expected {num_frames(self.source_len, self.frame_len, self.shift)} frames, "
                f"got {frames.shape[0]}"
            )
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames) -> "FrameSet":
        return FrameSet(np.asarray(frames, dtype=np.float64), self.frame_len, self.shift,
                        self.source_len, self.sample_rate)


def num_frames(source_len: int, frame_len: int, shift: int) -> int:
    if source_len < frame_len:
        return 0
    return (source_len - frame_len) // shift + 1


# --------------------------------------------------------------------------- WAV


def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM WAV file, scaling samples by 1/32768."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with _wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            if channels != 1:
                raise ValueError(f"{path}: channels={channels}, only mono is supported")
            if width != 2:
                raise ValueError(f"{path}: sample width={8 * width} bits, only 16-bit PCM is supported")
            raw = fh.readframes(fh.getnframes())
    except (_wave.Error, EOFError) as exc:
        raise ValueError(f"{path}: malformed or truncated WAV header ({exc})") from exc
    data = np.frombuffer(raw[: len(raw) - len(raw) % 2], dtype="<i2")
    return Waveform(rate, data.astype(np.float64) / PCM_SCALE)


def quantize(samples) -> np.ndarray:
    """Clip to [-1, 1 - 1/32768] and round to 16-bit integers."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0 - 1.0 / PCM_SCALE)
    return np.round(x * PCM_SCALE).astype("<i2")


def write_wav(path, wave: Waveform) -> None:
    path = Path(path)
    pcm = quantize(wave.samples)
    try:
        with open(path, "wb") as raw, _wave.open(raw, "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(wave.sample_rate)
            fh.writeframes(pcm.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


# ----------------------------------------------------------------------- framing


def frame(wave: Waveform, frame_len: int, shift: int) -> FrameSet:
    """Cut ``wave`` into frames; frame k covers samples [k*shift, k*shift + frame_len)."""
    if frame_len < 1:
        raise ValueError(f"frame length must be >= 1, got {frame_len}")
    if not 1 <= shift <= frame_len:
        raise ValueError(f"shift must satisfy 1 <= L <= M, got L={shift}, M={frame_len}")
    n = len(wave)
    if n < frame_len:
        frames = np.zeros((0, frame_len))
    else:
        frames = sliding_window_view(wave.samples, frame_len)[::shift].copy()
    return FrameSet(frames, frame_len, shift, n, wave.sample_rate)


def reconstruct(fs: FrameSet) -> Waveform:
    """Overlap-average frames back into a waveform of ``fs.source_len`` samples.

    Each position gets the mean of all frame samples covering it; uncovered
    tail positions are zero.
    """
    # running mean, so positions covered by identical values come back exactly
    mean = np.zeros(fs.source_len)
    count = np.zeros(fs.source_len)
    k = fs.num_frames
    if k:
        starts = np.arange(k) * fs.shift
        for j in range(fs.frame_len):
            idx = starts + j
            count[idx] += 1.0
            mean[idx] += (fs.frames[:, j] - mean[idx]) / count[idx]
    return Waveform(fs.sample_rate, mean)


# --------------------------------------------------------------------------- SNR


def power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x)) if x.size else 0.0


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> tuple[Waveform, float]:
    """Add ``noise`` (truncated to the clean length) scaled to reach ``snr_db``.

    Returns the noisy waveform and the noise scale factor.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValueError(f"sample-rate mismatch: {clean.sample_rate} vs {noise.sample_rate}")
    n = len(clean)
    if len(noise) < n:
        raise ValueError(f"noise is shorter than clean speech ({len(noise)} < {n})")
    d = noise.samples[:n]
    p_clean = power(clean.samples)
    p_noise = power(d)
    if p_clean == 0.0:
        raise ValueError("clean signal has zero power")
    if p_noise == 0.0:
        raise ValueError("noise has zero power over the clean-length window")
    alpha = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean.sample_rate, clean.samples + alpha * d), alpha


def measure_snr(clean: Waveform, degraded: Waveform) -> float:
    """SNR of ``degraded`` against ``clean`` in dB; ``math.inf`` if identical."""
    if len(clean) != len(degraded):
        raise ValueError(f"length mismatch: {len(clean)} vs {len(degraded)}")
    if clean.sample_rate != degraded.sample_rate:
        raise ValueError(f"sample-rate mismatch: {clean.sample_rate} vs {degraded.sample_rate}")
    p_err = power(degraded.samples - clean.samples)
    if p_err == 0.0:
        return math.inf
    p_clean = power(clean.samples)
    if p_clean == 0.0:
        return -math.inf
    return 10.0 * math.log10(p_clean / p_err)


# -------------------------------------------------------------------- resampling

RESAMPLE_TAPS_PER_PHASE = 64
KAISER_BETA = 8.6


def resample(wave: Waveform, target_rate: int) -> Waveform:
    """Rational-ratio resampling with a Kaiser-windowed sinc low-pass.

    The prototype filter has 64 taps per polyphase branch; output length is
    ``round(len * target / source)``.
    """
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == wave.sample_rate:
        return wave
    ratio = Fraction(int(target_rate), wave.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    n_out = int(round(len(wave) * target_rate / wave.sample_rate))
    if len(wave) == 0:
        return Waveform(target_rate, np.zeros(0))
    ntaps = RESAMPLE_TAPS_PER_PHASE * up + 1
    # resample_poly applies the gain of `up` itself
    h = sps.firwin(ntaps, 1.0 / max(up, down), window=("kaiser", KAISER_BETA))
    y = sps.resample_poly(wave.samples, up, down, window=h)
    if y.shape[0] >= n_out:
        y = y[:n_out]
    else:
        y = np.concatenate([y, np.zeros(n_out - y.shape[0])])
    return Waveform(target_rate, y)


# ---------------------------------------------------------------- synthetic data

_KINDS = ("white", "pink", "engine", "tone", "chirp")


@dataclass(frozen=True)
class NoiseKind:
    """A synthetic noise family: white, pink, engine, tone(freq) or chirp(freq -> f1)."""

    kind: str
    freq: float | None = None
    f1: float | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {', '.join(_KINDS)}")
        if self.kind == "tone" and self.freq is None:
            raise ValueError("tone noise needs a frequency")
        if self.kind == "chirp" and (self.freq is None or self.f1 is None):
            raise ValueError("chirp noise needs start and end frequencies")

    @classmethod
    def parse(cls, text: str) -> "NoiseKind":
        """Parse ``white``, ``pink``, ``engine``, ``tone@1000`` or ``chirp@200-6000``."""
        name, _, arg = text.strip().lower().partition("@")
        if name == "tone":
            if not arg:
                raise ValueError("tone needs a frequency, e.g. tone@1000")
            return cls("tone", float(arg))
        if name == "chirp":
            lo, sep, hi = arg.partition("-")
            if not sep:
                raise ValueError("chirp needs a range, e.g. chirp@200-6000")
            return cls("chirp", float(lo), float(hi))
        if arg:
            raise ValueError(f"noise kind {name!r} takes no parameter")
        return cls(name)

    @property
    def label(self) -> str:
        if self.kind == "tone":
            return f"tone{self.freq:g}"
        if self.kind == "chirp":
            return f"chirp{self.freq:g}-{self.f1:g}"
        return self.kind

    def __str__(self):
        if self.kind == "tone":
            return f"tone@{self.freq:g}"
        if self.kind == "chirp":
            return f"chirp@{self.freq:g}-{self.f1:g}"
        return self.kind


WHITE = NoiseKind("white")
PINK = NoiseKind("pink")
ENGINE = NoiseKind("engine")


def _peak_normalize(x: np.ndarray, peak: float = 0.5) -> np.ndarray:
    m = np.max(np.abs(x)) if x.size else 0.0
    return x * (peak / m) if m > 0 else x


def _rng(seed: int, *stream) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *stream])


def gen_signal(kind: NoiseKind, length: int, sample_rate: int, seed: int) -> Waveform:
    """Deterministic synthetic signal of ``length`` samples, peak amplitude 0.5."""
    if length < 0:
        raise ValueError(f"length must be >= 0, got {length}")
    nyq = sample_rate / 2.0
    for f in (kind.freq, kind.f1):
        if f is not None and not 0.0 < f < nyq:
            raise ValueError(f"frequency {f:g} Hz outside (0, {nyq:g}) Hz for {kind}")
    if length == 0:
        return Waveform(sample_rate, np.zeros(0))
    rng = _rng(seed, _KINDS.index(kind.kind))
    t = np.arange(length) / sample_rate

    if kind.kind == "white":
        x = rng.standard_normal(length)
    elif kind.kind == "pink":
        white = rng.standard_normal(length)
        spec = np.fft.rfft(white)
        f = np.fft.rfftfreq(length, 1.0 / sample_rate)
        gain = np.zeros_like(f)
        gain[1:] = 1.0 / np.sqrt(f[1:])
        x = np.fft.irfft(spec * gain, n=length)
    elif kind.kind == "engine":
        phases = rng.uniform(0, 2 * np.pi, size=8)
        mod_phase = rng.uniform(0, 2 * np.pi)
        x = np.zeros(length)
        for h in range(1, 9):
            x += np.sin(2 * np.pi * 40.0 * h * t + phases[h - 1]) / h
        x *= 1.0 + 0.3 * np.sin(2 * np.pi * 1.5 * t + mod_phase)
    elif kind.kind == "tone":
        x = np.sin(2 * np.pi * kind.freq * t + rng.uniform(0, 2 * np.pi))
    else:
        duration = length / sample_rate
        sweep = kind.freq * t + (kind.f1 - kind.freq) * t * t / (2.0 * duration)
        x = np.sin(2 * np.pi * sweep + rng.uniform(0, 2 * np.pi))
    return Waveform(sample_rate, _peak_normalize(x))


def gen_speech_like(length: int, sample_rate: int, seed: int) -> Waveform:
    """Speech surrogate: voiced harmonic segments, broadband bursts and silences.

    Voiced segments are amplitude-modulated harmonic complexes (f0 in
    80-250 Hz) shaped by two formant-like resonances; bursts are high-passed
    noise standing in for fricatives. Peak amplitude is 0.5.
    """
    if length < 0:
        raise ValueError(f"length must be >= 0, got {length}")
    rng = _rng(seed, 101)
    x = np.zeros(length)
    if length == 0:
        return Waveform(sample_rate, x)
    nyq = sample_rate / 2.0
    n_voiced = int(rng.integers(3, 9))
    pieces = []
    for i in range(n_voiced):
        pieces.append("voiced")
        if rng.random() < 0.6:
            pieces.append("burst")
        pieces.append("silence")
    weights = {"voiced": 1.0, "burst": 0.35, "silence": 0.25}
    raw = np.array([weights[p] * rng.uniform(0.7, 1.3) for p in pieces])
    bounds = np.concatenate([[0], np.cumsum(raw / raw.sum() * length)]).astype(int)
    bounds[-1] = length
    burst_sos = sps.butter(4, min(2000.0, 0.25 * nyq) / nyq, btype="highpass", output="sos")

    for piece, a, b in zip(pieces, bounds[:-1], bounds[1:]):
        n = b - a
        if n <= 0 or piece == "silence":
            continue
        t = np.arange(n) / sample_rate
        env = np.sin(np.pi * (np.arange(n) + 0.5) / n) ** 0.5
        if piece == "voiced":
            f0 = rng.uniform(80.0, 250.0)
            f0_track = f0 * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t))
            phase = 2 * np.pi * np.cumsum(f0_track) / sample_rate
            formants = (rng.uniform(300.0, 900.0), rng.uniform(1000.0, 2800.0))
            seg = np.zeros(n)
            for h in range(1, int(min(40, nyq * 0.9 // (f0 * 1.1))) + 1):
                fh = f0 * h
                amp = sum(1.0 / (1.0 + ((fh - fc) / (0.15 * fc + 80.0)) ** 2) for fc in formants)
                amp += 0.02 * (1000.0 / fh)
                seg += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
            seg *= 1.0 + 0.4 * np.sin(2 * np.pi * rng.uniform(3.0, 7.0) * t)
            x[a:b] = seg / (np.std(seg) + 1e-12) * env
        else:
            seg = sps.sosfilt(burst_sos, rng.standard_normal(n))
            x[a:b] = 0.4 * seg / (np.std(seg) + 1e-12) * env
    if not np.any(x):
        x = rng.standard_normal(length)
    return Waveform(sample_rate, _peak_normalize(x))
