"""Audio samples, labeled datasets, WAV/manifest I/O and splitting."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import CANONICAL_SR, clip_audio, resample
from .errors import DatasetLoadError, DecodeError, ParameterError, SchemaError

CLEAN = "clean"
POISONED = "poisoned"
PROVENANCES = (CLEAN, POISONED)
ROLES = ("clean_train", "clean_test", "backdoor_train", "probe")
MANIFEST_COLUMNS = ("id", "path", "label", "speaker_id")


@dataclass
class AudioSample:
    id: str
    waveform: np.ndarray
    sample_rate: int
    label: int
    speaker_id: str = ""
    provenance: str = CLEAN
    trigger_id: str | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        wav = np.asarray(self.waveform, dtype=np.float64)
        if wav.ndim != 1 or wav.size < 1:
            raise ParameterError(f"sample {self.id!r}: waveform must be 1-D with >= 1 value")
        if not np.all(np.isfinite(wav)):
            raise ParameterError(f"sample {self.id!r}: waveform has non-finite values")
        self.waveform = clip_audio(wav)
        if self.sample_rate <= 0:
            raise ParameterError(f"sample {self.id!r}: sample_rate must be positive")
        if self.label < 0:
            raise ParameterError(f"sample {self.id!r}: label must be non-negative")
        if self.provenance not in PROVENANCES:
            raise ParameterError(f"sample {self.id!r}: unknown provenance {self.provenance!r}")
        if (self.provenance == POISONED) != (self.trigger_id is not None):
            raise ParameterError(
                f"sample {self.id!r}: trigger_id must be set iff provenance is 'poisoned'"
            )

    @property
    def duration(self) -> float:
        return self.waveform.size / self.sample_rate

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.waveform.astype("<f8").tobytes())
        meta = [self.id, self.sample_rate, self.label, self.speaker_id, self.provenance, self.trigger_id]
        h.update(json.dumps(meta).encode())
        return h.hexdigest()

    def with_waveform(self, waveform, **changes) -> AudioSample:
        return replace(self, waveform=waveform, metadata=dict(self.metadata), **changes)


@dataclass
class LabeledDataset:
    samples: list[AudioSample]
    num_classes: int
    role: str = "clean_train"
    label_names: list[str] | None = None

    def __post_init__(self):
        if self.num_classes < 1:
            raise ParameterError("num_classes must be positive")
        if self.role not in ROLES:
            raise ParameterError(f"unknown dataset role {self.role!r}")
        seen = set()
        for s in self.samples:
            if s.label >= self.num_classes:
                raise SchemaError(f"sample {s.id!r} has label {s.label} >= num_classes {self.num_classes}")
            if s.id in seen:
                raise SchemaError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def by_id(self) -> dict[str, AudioSample]:
        return {s.id: s for s in self.samples}

    def subset(self, ids, role: str | None = None) -> LabeledDataset:
        lookup = self.by_id()
        return LabeledDataset([lookup[i] for i in ids], self.num_classes, role or self.role, self.label_names)

    def with_role(self, role: str) -> LabeledDataset:
        return LabeledDataset(list(self.samples), self.num_classes, role, self.label_names)

    def digest(self) -> str:
        h = hashlib.sha256(f"{self.num_classes}".encode())
        for s in self.samples:
            h.update(s.digest().encode())
        return h.hexdigest()


# --------------------------------------------------------------------------
# WAV I/O
# --------------------------------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono PCM16 / float32 WAV file as float64 in [-1, 1]."""
    path = Path(path)
    if not path.exists():
        raise DatasetLoadError(f"audio file not found: {path}", path=str(path))
    try:
        sr, data = wavfile.read(path)
    except Exception as exc:
        raise DecodeError(f"cannot decode {path}: {exc}", path=str(path)) from exc
    if data.ndim != 1:
        raise DecodeError(f"{path}: expected mono audio, got shape {data.shape}", path=str(path))
    if data.dtype == np.int16:
        wav = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        wav = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        wav = data.astype(np.float64)
    else:
        raise DecodeError(f"{path}: unsupported sample format {data.dtype}", path=str(path))
    return wav, int(sr)


def write_wav(path, waveform, sample_rate: int = CANONICAL_SR, subtype: str = "float32") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wav = clip_audio(waveform)
    if subtype == "float32":
        data = wav.astype(np.float32)
    elif subtype == "pcm16":
        data = np.clip(np.round(wav * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ParameterError(f"unknown WAV subtype {subtype!r}")
    wavfile.write(path, int(sample_rate), data)
    return path


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

def vocab_path_for(manifest_path) -> Path:
    """Sidecar vocabulary file: ``train.csv`` -> ``train.vocab.json``."""
    p = Path(manifest_path)
    return p.with_name(p.stem + ".vocab.json")


def read_vocab(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DatasetLoadError(f"vocabulary file not found: {path}", path=str(path))
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    labels = doc.get("labels")
    if not isinstance(labels, dict):
        raise SchemaError(f"{path}: 'labels' must map label strings to indices")
    num_classes = int(doc.get("num_classes", len(labels)))
    if any(not isinstance(v, int) or v < 0 or v >= num_classes for v in labels.values()):
        raise SchemaError(f"{path}: label indices must lie in [0, {num_classes})")
    return {
        "labels": labels,
        "num_classes": num_classes,
        "sample_rate": int(doc.get("sample_rate", CANONICAL_SR)),
    }


def write_vocab(path, labels: dict[str, int], num_classes: int | None = None,
                sample_rate: int = CANONICAL_SR) -> Path:
    path = Path(path)
    doc = {
        "labels": dict(labels),
        "num_classes": int(num_classes if num_classes is not None else len(labels)),
        "sample_rate": int(sample_rate),
    }
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def write_manifest(path, rows) -> Path:
    """``rows`` are ``(id, relative_path, label_string, speaker_id)`` tuples."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for row in rows:
            w.writerow(row)
    return path


def load_dataset(manifest_path, role: str = "clean_train") -> LabeledDataset:
    """Load every row of a CSV manifest, resampling to the declared rate."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetLoadError(f"manifest not found: {manifest_path}", path=str(manifest_path))
    vocab = read_vocab(vocab_path_for(manifest_path))
    labels, target_sr = vocab["labels"], vocab["sample_rate"]
    names = [None] * vocab["num_classes"]
    for name, idx in labels.items():
        names[idx] = name

    samples = []
    with manifest_path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise SchemaError(f"{manifest_path}: header lacks columns {sorted(missing)}")
        for rowno, row in enumerate(reader, start=2):
            if row["label"] not in labels:
                raise SchemaError(
                    f"{manifest_path}:{rowno}: label {row['label']!r} is not in the vocabulary"
                )
            audio_path = manifest_path.parent / row["path"]
            try:
                wav, sr = read_wav(audio_path)
            except DatasetLoadError as exc:
                exc.row = rowno
                exc.args = (f"{manifest_path}:{rowno} (id {row['id']}): {exc.args[0]}",)
                raise
            samples.append(AudioSample(
                id=row["id"],
                waveform=resample(wav, sr, target_sr),
                sample_rate=target_sr,
                label=labels[row["label"]],
                speaker_id=row["speaker_id"],
            ))
    return LabeledDataset(samples, vocab["num_classes"], role, names)


def floor_count(fraction: float, n: int) -> int:
    """``floor(fraction * n)`` tolerant of binary rounding (0.29 * 100 -> 29)."""
    return int(math.floor(fraction * n + 1e-9))


def split_dataset(dataset: LabeledDataset, train_fraction: float, seed: int):
    """Seeded random partition into ``floor(train_fraction * N)`` train ids and the rest."""
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(dataset) == 0:
        raise ParameterError("cannot split an empty dataset")
    n = len(dataset)
    n_train = floor_count(train_fraction, n)
    order = np.random.default_rng(seed).permutation(n)
    train = [dataset.samples[i] for i in sorted(order[:n_train])]
    test = [dataset.samples[i] for i in sorted(order[n_train:])]
    return (
        LabeledDataset(train, dataset.num_classes, "clean_train", dataset.label_names),
        LabeledDataset(test, dataset.num_classes, "clean_test", dataset.label_names),
    )
