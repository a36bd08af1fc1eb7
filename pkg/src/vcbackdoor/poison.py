"""Poison-only backdoor dataset construction.

The attacker picks ``n = floor(p * N)`` training samples (at least one when
``p > 0``), applies a trigger to each and relabels them to the target
class; the backdoor set is the untouched remainder plus these poisoned
samples, in the original order.  Nothing here can reach training
hyperparameters: the engine only reads and writes samples and labels.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import POISONED, AudioSample, LabeledDataset, floor_count, write_wav
from .errors import BuildError, CapacityError, FormatError, ParameterError, ValidationError
from .triggers import TriggerSpec, VCAdapterConfig, apply_trigger

POISON_MANIFEST_FORMAT = "vcbackdoor-poison/1"


@dataclass
class PoisonPlan:
    poison_ids: list[str]
    target_label: int
    poisoning_rate: float
    seed: int
    trigger: TriggerSpec
    exclude_target_class: bool = True
    source_ids: list[str] = field(default_factory=list, repr=False)

    @property
    def n(self) -> int:
        return len(self.poison_ids)

    def to_dict(self) -> dict:
        return {
            "poison_ids": list(self.poison_ids),
            "target_label": int(self.target_label),
            "poisoning_rate": float(self.poisoning_rate),
            "seed": int(self.seed),
            "trigger": self.trigger.to_dict(),
            "trigger_id": self.trigger.trigger_id,
            "exclude_target_class": bool(self.exclude_target_class),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> PoisonPlan:
        trig = dict(doc["trigger"])
        trig.setdefault("trigger_id", doc.get("trigger_id"))
        if trig["trigger_id"] is None:
            del trig["trigger_id"]
        return cls(
            poison_ids=list(doc["poison_ids"]),
            target_label=int(doc["target_label"]),
            poisoning_rate=float(doc["poisoning_rate"]),
            seed=int(doc["seed"]),
            trigger=TriggerSpec.from_dict(trig),
            exclude_target_class=bool(doc.get("exclude_target_class", True)),
        )

    def validate_against(self, dataset: LabeledDataset) -> None:
        if not 0 <= self.target_label < dataset.num_classes:
            raise ValidationError(f"target label {self.target_label} outside [0, {dataset.num_classes})")
        ids = set(dataset.ids)
        unknown = [i for i in self.poison_ids if i not in ids]
        if unknown:
            raise ValidationError(f"poison ids not in dataset: {unknown[:5]}")
        if len(set(self.poison_ids)) != len(self.poison_ids):
            raise ValidationError("poison ids contain duplicates")


def poison_count(p: float, n_total: int) -> int:
    """``floor(p * N)``, promoted to 1 when ``p > 0`` and the floor is 0."""
    n = floor_count(p, n_total)
    if p > 0 and n == 0:
        n = 1
    return n


def poison_order(dataset: LabeledDataset, y_t: int, seed: int, exclude_target_class: bool = True) -> list[str]:
    """Seed-keyed permutation of eligible ids; every plan takes a prefix of it."""
    eligible = [s.id for s in dataset.samples if not (exclude_target_class and s.label == y_t)]
    eligible.sort()
    perm = np.random.default_rng(seed).permutation(len(eligible))
    return [eligible[i] for i in perm]


def select_poison_subset(dataset: LabeledDataset, p: float, y_t: int, seed: int,
                         exclude_target_class: bool = True,
                         trigger: TriggerSpec | None = None) -> PoisonPlan:
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"poisoning rate must lie in [0, 1], got {p}")
    if len(dataset) == 0:
        raise ParameterError("cannot poison an empty dataset")
    if not 0 <= y_t < dataset.num_classes:
        raise ParameterError(f"target label {y_t} outside [0, {dataset.num_classes})")
    n = poison_count(p, len(dataset))
    order = poison_order(dataset, y_t, seed, exclude_target_class)
    if n > len(order):
        raise CapacityError(f"need {n} poison samples but only {len(order)} are eligible")
    return PoisonPlan(
        poison_ids=order[:n],
        target_label=int(y_t),
        poisoning_rate=float(p),
        seed=int(seed),
        trigger=trigger if trigger is not None else TriggerSpec("none"),
        exclude_target_class=exclude_target_class,
        source_ids=dataset.ids,
    )


def build_backdoor_dataset(dataset: LabeledDataset, plan: PoisonPlan,
                           adapter: VCAdapterConfig | None = None, jobs: int = 1) -> LabeledDataset:
    """Backdoor training set: clean remainder plus relabelled triggered samples."""
    plan.validate_against(dataset)
    chosen = set(plan.poison_ids)
    targets = [s for s in dataset.samples if s.id in chosen]

    def poison_one(sample: AudioSample) -> AudioSample:
        try:
            out = apply_trigger(sample, plan.trigger, adapter)
        except Exception as exc:
            raise BuildError(f"trigger failed on sample {sample.id!r}: {exc}", sample_id=sample.id) from exc
        trigger_id = plan.trigger.trigger_id
        return AudioSample(
            id=sample.id,
            waveform=out.waveform,
            sample_rate=out.sample_rate,
            label=plan.target_label,
            speaker_id=sample.speaker_id,
            provenance=POISONED,
            trigger_id=trigger_id,
            metadata={**out.metadata, "source_label": sample.label},
        )

    if jobs > 1 and len(targets) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            poisoned = list(pool.map(poison_one, targets))
    else:
        poisoned = [poison_one(s) for s in targets]
    replaced = {s.id: s for s in poisoned}
    samples = [replaced.get(s.id, s) for s in dataset.samples]
    return LabeledDataset(samples, dataset.num_classes, "backdoor_train", dataset.label_names)


# --------------------------------------------------------------------------
# poison manifest
# --------------------------------------------------------------------------

def write_poison_manifest(plan: PoisonPlan, dataset: LabeledDataset, path,
                          audio_dir=None, extra: dict | None = None) -> Path:
    """Persist the plan and per-sample provenance as JSON.

    With ``audio_dir`` the poisoned waveforms are written there under their
    content digest and referenced from the provenance table.
    """
    path = Path(path)
    rows = []
    for s in dataset.samples:
        row = {"id": s.id, "label": int(s.label), "provenance": s.provenance, "trigger_id": s.trigger_id,
               "digest": s.digest()}
        if s.provenance == POISONED:
            row["source_label"] = s.metadata.get("source_label")
            if audio_dir is not None:
                digest = hashlib.sha256(s.waveform.astype("<f8").tobytes()).hexdigest()
                wav_path = Path(audio_dir) / f"{digest}.wav"
                if not wav_path.exists():
                    write_wav(wav_path, s.waveform, s.sample_rate)
                row["audio"] = str(wav_path.relative_to(path.parent)) if wav_path.is_relative_to(path.parent) else str(wav_path)
        rows.append(row)
    doc = {
        "format": POISON_MANIFEST_FORMAT,
        "plan": plan.to_dict(),
        "dataset_digest": dataset.digest(),
        "num_classes": dataset.num_classes,
        "samples": rows,
    }
    if extra:
        doc.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write poison manifest {path}: {exc}") from exc
    return path


def read_poison_manifest(path, dataset: LabeledDataset | None = None) -> tuple[PoisonPlan, dict]:
    """Load a poison manifest; with ``dataset`` also check it matches that data."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read poison manifest {path}: {exc}") from exc
    if doc.get("format") != POISON_MANIFEST_FORMAT:
        raise FormatError(f"{path}: unexpected format {doc.get('format')!r}")
    plan = PoisonPlan.from_dict(doc["plan"])
    rows = doc["samples"]
    row_ids = [r["id"] for r in rows]
    poisoned_rows = {r["id"] for r in rows if r["provenance"] == POISONED}
    if poisoned_rows != set(plan.poison_ids):
        raise ValidationError(f"{path}: provenance table disagrees with the plan's poison ids")
    if not set(plan.poison_ids) <= set(row_ids):
        raise ValidationError(f"{path}: plan references ids missing from the provenance table")
    for r in rows:
        if r["provenance"] == POISONED and r.get("trigger_id") != plan.trigger.trigger_id:
            raise ValidationError(f"{path}: sample {r['id']!r} has trigger_id {r.get('trigger_id')!r}")
    if dataset is not None:
        ids = set(dataset.ids)
        stray = [i for i in row_ids if i not in ids]
        if stray:
            raise ValidationError(f"{path}: ids not present in the dataset: {stray[:5]}")
        plan.validate_against(dataset)
    plan.source_ids = row_ids
    return plan, doc
