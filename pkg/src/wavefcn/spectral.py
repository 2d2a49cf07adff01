"""STFT analysis/synthesis, log power spectra and spectrogram export."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .signal import Waveform

N_FFT = 512
HOP = 256
N_BINS = N_FFT // 2 + 1
LPS_FLOOR = 1e-12
DB_FLOOR = -80.0


@dataclass(frozen=True)
class Spectrogram:
    coeffs: np.ndarray = field(repr=False)  # (num_frames, 257) complex
    sample_rate: int
    length: int
    hop: int = HOP
    n_fft: int = N_FFT
    window: str = "hann"

    def __post_init__(self):
        if self.coeffs.ndim != 2 or self.coeffs.shape[1] != self.n_fft // 2 + 1:
            raise ValueError(f"expected (frames, {self.n_fft // 2 + 1}) coefficients, got {self.coeffs.shape}")
        if not 1 <= self.hop <= self.n_fft:
            raise ValueError(f"hop must be in [1, {self.n_fft}], got {self.hop}")

    @property
    def num_frames(self) -> int:
        return self.coeffs.shape[0]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.coeffs)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.coeffs)

    def with_coeffs(self, coeffs) -> "Spectrogram":
        return Spectrogram(np.asarray(coeffs, dtype=np.complex128), self.sample_rate, self.length,
                           self.hop, self.n_fft, self.window)


@dataclass(frozen=True)
class LpsFeatures:
    values: np.ndarray = field(repr=False)  # (num_frames, 257)
    floor: float = LPS_FLOOR


def _window(n_fft: int) -> np.ndarray:
    return get_window("hann", n_fft, fftbins=True)


def _frame_count(length: int, n_fft: int, hop: int) -> int:
    # centred frames: n_fft // 2 zeros on both sides, enough frames to cover every sample twice
    padded = length + n_fft
    return 1 + int(np.ceil(max(padded - n_fft, 0) / hop))


def stft(wave: Waveform, hop: int = HOP, n_fft: int = N_FFT) -> Spectrogram:
    """Hann-windowed short-time Fourier transform keeping bins 0..n_fft/2.

    Frames are centred: the signal is zero-padded by n_fft/2 at the start
    and as needed at the end.
    """
    n = len(wave)
    if n < n_fft:
        raise ValueError(f"waveform has {n} samples, STFT needs at least {n_fft}")
    if not 1 <= hop <= n_fft:
        raise ValueError(f"hop must be in [1, {n_fft}], got {hop}")
    frames = _frame_count(n, n_fft, hop)
    total = (frames - 1) * hop + n_fft
    padded = np.zeros(total)
    padded[n_fft // 2:n_fft // 2 + n] = wave.samples
    idx = np.arange(frames)[:, None] * hop + np.arange(n_fft)[None, :]
    coeffs = np.fft.rfft(padded[idx] * _window(n_fft), axis=1)
    return Spectrogram(coeffs, wave.sample_rate, n, hop, n_fft)


def istft(spec: Spectrogram) -> Waveform:
    """Weighted overlap-add inverse, normalized by the summed squared window."""
    n_fft, hop = spec.n_fft, spec.hop
    win = _window(n_fft)
    frames = np.fft.irfft(spec.coeffs, n=n_fft, axis=1) * win
    total = (spec.num_frames - 1) * hop + n_fft
    out = np.zeros(total)
    norm = np.zeros(total)
    for k in range(spec.num_frames):
        out[k * hop:k * hop + n_fft] += frames[k]
        norm[k * hop:k * hop + n_fft] += win * win
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    start = n_fft // 2
    return Waveform(spec.sample_rate, out[start:start + spec.length])


def lps(spec: Spectrogram, floor: float = LPS_FLOOR) -> LpsFeatures:
    """Log power spectrum, floored at log(floor)."""
    return LpsFeatures(np.log(np.maximum(np.abs(spec.coeffs) ** 2, floor)), floor)


def lps_invert(features, phase_source: Spectrogram) -> Spectrogram:
    """Magnitude exp(lps / 2) recombined with the phase of ``phase_source``."""
    values = features.values if isinstance(features, LpsFeatures) else np.asarray(features)
    if values.shape != phase_source.coeffs.shape:
        raise ValueError(f"frame mismatch: LPS {values.shape} vs spectrogram {phase_source.coeffs.shape}")
    mag = np.abs(phase_source.coeffs)
    unit = np.ones_like(phase_source.coeffs)
    nz = mag > 0
    unit[nz] = phase_source.coeffs[nz] / mag[nz]
    return phase_source.with_coeffs(np.exp(values / 2.0) * unit)


def magnitude_db(spec: Spectrogram, floor_db: float = DB_FLOOR) -> np.ndarray:
    mag = np.abs(spec.coeffs)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag)
    return np.maximum(db, floor_db)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 greyscale, max value 255."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def grid_to_pgm(grid: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map values in [lo, hi] linearly to 0..255."""
    if hi <= lo:
        return np.zeros(grid.shape, dtype=np.uint8)
    scaled = (np.clip(grid, lo, hi) - lo) / (hi - lo) * 255.0
    return np.round(scaled).astype(np.uint8)


def write_csv_grid(path, grid: np.ndarray) -> None:
    np.savetxt(path, grid, delimiter=",", fmt="%.10g")


def spectrogram_export(wave: Waveform, path, format: str = "pgm") -> np.ndarray:
    """Write the dB magnitude spectrogram (frames x bins) as CSV or PGM.

    In the PGM, time runs left to right and frequency increases upward; the
    range [-80 dB, max] maps to 0..255. Returns the dB grid.
    """
    db = magnitude_db(stft(wave))
    if format == "csv":
        write_csv_grid(path, db)
    elif format == "pgm":
        image = grid_to_pgm(db.T[::-1], DB_FLOOR, float(db.max()))
        write_pgm(path, image)
    else:
        raise ValueError(f"unknown spectrogram format {format!r} (csv or pgm)")
    return db
