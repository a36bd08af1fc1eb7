"""Deterministic synthetic speech-like corpus for hermetic experiments.

Each class is a two-syllable "word": a fixed sequence of formant targets
plus an optional fricative noise burst.  Each speaker has a fundamental
frequency, a vocal-tract scale applied to the formants, and a spectral
tilt.  Utterances add per-sample jitter in pitch, formants, timing and
level, and a random smooth channel EQ.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AudioSample, LabeledDataset, write_manifest, write_vocab, write_wav
from .dsp import CANONICAL_SR

F0_RANGE = (85.0, 250.0)
TRACT_SCALE_RANGE = (0.85, 1.18)
TILT_RANGE = (-1.0, -0.3)  # log-amplitude slope per kHz
CHANNEL_SPREAD_DB = 4.0


@dataclass(frozen=True)
class WordShape:
    formants: tuple  # per syllable: (F1, F2, F3) in Hz
    burst_band: tuple | None  # (lo, hi) Hz of a fricative burst, or None
    burst_at_start: bool


@dataclass(frozen=True)
class Speaker:
    id: str
    f0: float
    tract_scale: float
    tilt: float


def make_words(n_classes: int, rng: np.random.Generator) -> list[WordShape]:
    words = []
    for c in range(n_classes):
        syllables = []
        for _ in range(2):
            f1 = rng.uniform(300, 850)
            f2 = rng.uniform(max(f1 + 300, 900), 2300)
            f3 = rng.uniform(2400, 3200)
            syllables.append((f1, f2, f3))
        burst = None
        if c % 2 == 1:
            lo = rng.uniform(3500, 5000)
            burst = (lo, lo + rng.uniform(1000, 2000))
        words.append(WordShape(tuple(syllables), burst, bool(rng.integers(0, 2))))
    return words


def make_speakers(n_speakers: int, rng: np.random.Generator, prefix: str = "spk") -> list[Speaker]:
    return [
        Speaker(f"{prefix}{i:02d}", rng.uniform(*F0_RANGE), rng.uniform(*TRACT_SCALE_RANGE), rng.uniform(*TILT_RANGE))
        for i in range(n_speakers)
    ]


def _envelope(freqs, formants, tilt):
    bw = np.array([90.0, 120.0, 180.0])
    amp = np.array([1.0, 0.7, 0.35])
    e = (amp[:, None] * np.exp(-0.5 * ((freqs[None, :] - np.asarray(formants)[:, None]) / bw[:, None]) ** 2)).sum(0)
    return (e + 0.02) * np.exp(tilt * freqs / 1000.0)


def _channel_colour(x, rng, sample_rate, spread_db: float = CHANNEL_SPREAD_DB):
    """Random smooth per-recording EQ (microphone/room variation)."""
    if spread_db <= 0:
        return x
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(x.size, 1.0 / sample_rate)
    knots = np.array([0.0, 500.0, 1500.0, 3000.0, 5000.0, sample_rate / 2])
    gains_db = rng.uniform(-spread_db, spread_db, size=knots.size)
    return np.fft.irfft(spec * 10 ** (np.interp(f, knots, gains_db) / 20), n=x.size)


def synthesize_utterance(word: WordShape, speaker: Speaker, rng: np.random.Generator,
                         duration: float = 0.5, sample_rate: int = CANONICAL_SR) -> np.ndarray:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    out = np.zeros(n)
    f0 = speaker.f0 * rng.uniform(0.96, 1.04)
    glide = rng.uniform(-0.08, 0.08)
    onset = rng.uniform(0.03, 0.08) * duration / 0.5
    syl_len = 0.36 * duration
    gap = 0.04 * duration
    for s, formants in enumerate(word.formants):
        start = onset + s * (syl_len + gap) + rng.uniform(-0.01, 0.01)
        mask = (t >= start) & (t < start + syl_len)
        if not mask.any():
            continue
        ts = t[mask] - start
        env_t = np.sin(np.pi * ts / syl_len) ** 2
        f0_t = f0 * (1.0 + glide * (ts / syl_len - 0.5))
        phase = 2 * np.pi * np.cumsum(f0_t) / sample_rate
        scaled = np.asarray(formants) * speaker.tract_scale * rng.uniform(0.97, 1.03, size=3)
        n_harm = int(4000 // f0)
        h = np.arange(1, n_harm + 1)
        gains = _envelope(h * f0, scaled, speaker.tilt)
        seg = (gains[:, None] * np.sin(h[:, None] * phase[None, :] + rng.uniform(0, 2 * np.pi, size=(n_harm, 1)))).sum(0)
        out[mask] += env_t * seg
    out /= max(np.max(np.abs(out)), 1e-9)

    if word.burst_band is not None:
        lo, hi = word.burst_band
        noise = rng.standard_normal(n)
        spec = np.fft.rfft(noise)
        f = np.fft.rfftfreq(n, 1.0 / sample_rate)
        spec[(f < lo) | (f > hi)] = 0
        burst = np.fft.irfft(spec, n=n)
        burst /= max(np.max(np.abs(burst)), 1e-9)
        centre = onset * 0.5 if word.burst_at_start else min(duration - 0.05, onset + 2 * syl_len + gap + 0.02)
        burst *= 0.5 * np.exp(-0.5 * ((t - centre) / 0.015) ** 2)
        out += burst

    out = _channel_colour(out, rng, sample_rate)
    out += 0.003 * rng.standard_normal(n)
    out *= rng.uniform(0.3, 0.6) / max(np.max(np.abs(out)), 1e-9)
    return out


def synthesize_corpus(n_classes: int = 8, samples_per_class: int = 100, n_speakers: int = 16,
                      duration: float = 0.5, seed: int = 0, sample_rate: int = CANONICAL_SR) -> LabeledDataset:
    """In-memory corpus; identical for identical arguments."""
    rng = np.random.default_rng(seed)
    words = make_words(n_classes, rng)
    speakers = make_speakers(n_speakers, rng)
    samples = []
    for c, word in enumerate(words):
        for i in range(samples_per_class):
            spk = speakers[i % n_speakers]
            utt_rng = np.random.default_rng([seed, c, i])
            wav = synthesize_utterance(word, spk, utt_rng, duration, sample_rate)
            samples.append(AudioSample(f"c{c}_{i:04d}", wav, sample_rate, c, spk.id))
    names = [f"word{c}" for c in range(n_classes)]
    return LabeledDataset(samples, n_classes, "clean_train", names)


def synthesize_target_speech(speaker_seed: int, duration: float = 0.5,
                             sample_rate: int = CANONICAL_SR) -> tuple[Speaker, np.ndarray]:
    """A reference utterance for a target speaker outside the corpus speakers."""
    rng = np.random.default_rng([speaker_seed, 9999])
    speaker = make_speakers(1, rng, prefix=f"tgt{speaker_seed}-")[0]
    word = make_words(1, rng)[0]
    return speaker, synthesize_utterance(word, speaker, rng, duration, sample_rate)


def write_corpus(out_dir, dataset: LabeledDataset, manifest_name: str = "manifest.csv",
                 subtype: str = "pcm16") -> Path:
    """Write WAVs, a CSV manifest and its vocabulary sidecar; return the manifest path."""
    out_dir = Path(out_dir)
    rows = []
    for s in dataset.samples:
        rel = Path("audio") / f"{s.id}.wav"
        write_wav(out_dir / rel, s.waveform, s.sample_rate, subtype)
        rows.append((s.id, rel.as_posix(), dataset.label_names[s.label], s.speaker_id))
    manifest = write_manifest(out_dir / manifest_name, rows)
    labels = {name: i for i, name in enumerate(dataset.label_names)}
    sr = dataset.samples[0].sample_rate if dataset.samples else CANONICAL_SR
    write_vocab(manifest.with_name(manifest.stem + ".vocab.json"), labels, dataset.num_classes, sr)
    return manifest
