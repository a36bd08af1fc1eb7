"""Short-time Fourier analysis/synthesis and the log-mel classifier frontend."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import resample_poly

from .errors import ParameterError, ShapeError, SizeError
from .kernels import overlap_add

CANONICAL_SR = 16000
FRAME_LENGTH = 512
HOP_LENGTH = 128
LOG_FLOOR = 1e-10


@dataclass
class Spectrogram:
    magnitudes: np.ndarray  # (bins, frames), >= 0
    phases: np.ndarray  # radians, same shape
    frame_length: int = FRAME_LENGTH
    hop_length: int = HOP_LENGTH
    sample_rate: int = CANONICAL_SR
    length: int | None = None  # source length in samples; istft trims to it

    def __post_init__(self):
        if self.magnitudes.shape != self.phases.shape:
            raise ShapeError(
                f"magnitudes {self.magnitudes.shape} and phases {self.phases.shape} differ"
            )

    @property
    def n_bins(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[1]

    def complex(self) -> np.ndarray:
        return self.magnitudes * np.exp(1j * self.phases)


@lru_cache(maxsize=8)
def hann(n: int) -> np.ndarray:
    """Periodic Hann window (satisfies COLA for hop = n/4)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _check_frames(frame_length: int, hop_length: int):
    if not (frame_length >= hop_length >= 1):
        raise ParameterError(
            f"need frame_length >= hop_length >= 1, got {frame_length}, {hop_length}"
        )


def stft(
    waveform,
    frame_length: int = FRAME_LENGTH,
    hop_length: int = HOP_LENGTH,
    sample_rate: int = CANONICAL_SR,
) -> Spectrogram:
    """Hann-windowed STFT with reflect padding of ``frame_length // 2`` per edge.

    The frame count is ``1 + len(waveform) // hop_length``.
    """
    _check_frames(frame_length, hop_length)
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D waveform, got shape {x.shape}")
    if x.size < frame_length:
        raise SizeError(f"waveform of {x.size} samples is shorter than one frame ({frame_length})")
    pad = frame_length // 2
    padded = np.pad(x, pad, mode="reflect")
    frames = sliding_window_view(padded, frame_length)[::hop_length]
    spec = np.fft.rfft(frames * hann(frame_length), axis=1).T
    return Spectrogram(
        magnitudes=np.abs(spec),
        phases=np.angle(spec),
        frame_length=frame_length,
        hop_length=hop_length,
        sample_rate=sample_rate,
        length=x.size,
    )


def istft(spec: Spectrogram) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    Output length equals ``spec.length`` when set, otherwise
    ``(n_frames - 1) * hop_length``.
    """
    n = spec.frame_length
    if spec.magnitudes.ndim != 2 or spec.n_bins != n // 2 + 1:
        raise ShapeError(
            f"spectrogram with {spec.magnitudes.shape} does not match frame_length {n}"
        )
    if spec.magnitudes.shape != spec.phases.shape:
        raise ShapeError("magnitudes and phases differ in shape")
    hop = spec.hop_length
    win = hann(n)
    frames = np.fft.irfft(spec.complex().T, n=n, axis=1) * win
    total = n + hop * (spec.n_frames - 1)
    y = overlap_add(frames, hop, total)
    wsum = overlap_add(np.broadcast_to(win * win, frames.shape), hop, total)
    nz = wsum > 1e-8
    y[nz] /= wsum[nz]
    pad = n // 2
    length = spec.length if spec.length is not None else hop * (spec.n_frames - 1)
    out = y[pad:pad + length]
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out


def clip_audio(waveform) -> np.ndarray:
    return np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)


def fit_length(waveform, length: int) -> np.ndarray:
    """Trim or zero-pad at the end to exactly ``length`` samples."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.size >= length:
        return x[:length]
    return np.pad(x, (0, length - x.size))


def resample(waveform, orig_sr: int, target_sr: int = CANONICAL_SR) -> np.ndarray:
    x = np.asarray(waveform, dtype=np.float64)
    if orig_sr == target_sr:
        return x
    frac = Fraction(int(target_sr), int(orig_sr))
    return resample_poly(x, frac.numerator, frac.denominator)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(n_mels: int, frame_length: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``(n_mels, frame_length // 2 + 1)``."""
    if n_mels < 1:
        raise ParameterError(f"n_mels must be >= 1, got {n_mels}")
    fmax = sample_rate / 2.0 if fmax is None else fmax
    freqs = np.fft.rfftfreq(frame_length, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lower) / (centre - lower)
    down = (upper - freqs) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(up, down))
    # Filters narrower than one FFT bin would be silent; give them their nearest bin.
    for m in np.flatnonzero(fb.sum(axis=1) == 0):
        fb[m, np.argmin(np.abs(freqs - centre[m, 0]))] = 1.0
    fb.setflags(write=False)
    return fb


def log_mel_features(
    waveform,
    sample_rate: int = CANONICAL_SR,
    n_mels: int = 40,
    frame_length: int = FRAME_LENGTH,
    hop_length: int = HOP_LENGTH,
) -> np.ndarray:
    """Log mel-band power, shape ``(n_mels, frames)``, floored at 1e-10."""
    if n_mels < 1:
        raise ParameterError(f"n_mels must be >= 1, got {n_mels}")
    spec = stft(waveform, frame_length, hop_length, sample_rate)
    power = spec.magnitudes ** 2
    energies = mel_filterbank(n_mels, frame_length, sample_rate) @ power
    return np.log(np.maximum(energies, LOG_FLOOR))
