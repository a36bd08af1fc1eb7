"""Fine-tuning defense: continue training a backdoored model on clean data."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import POISONED, LabeledDataset, floor_count
from .errors import ContractViolation, ParameterError
from .evaluation import evaluate, triggered_samples
from .train import TrainConfig, TrainedModel, train_classifier
from .triggers import TriggerSpec, VCAdapterConfig

DEFAULT_LR_SCALE = 0.1
DEFAULT_CLEAN_FRACTION = 0.1


@dataclass
class DefenseCurve:
    epochs: list[int]
    asr: list[float]
    ba: list[float]
    finetune_config: TrainConfig
    clean_subset_digest: str
    trigger_id: str = ""
    target_label: int = 0
    train_loss: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.epochs) == len(self.asr) == len(self.ba)):
            raise ValueError("defense curve lists must have equal length")

    def to_dict(self) -> dict:
        return {"epochs": list(self.epochs), "asr": list(self.asr), "ba": list(self.ba),
                "finetune_config": self.finetune_config.to_dict(),
                "clean_subset_digest": self.clean_subset_digest, "trigger_id": self.trigger_id,
                "target_label": self.target_label, "train_loss": list(self.train_loss)}

    @classmethod
    def from_dict(cls, d: dict) -> DefenseCurve:
        d = dict(d)
        d["finetune_config"] = TrainConfig(**d["finetune_config"])
        return cls(**d)

    def table(self) -> str:
        lines = [f"{'epoch':>5} {'ASR':>8} {'BA':>8}"]
        lines += [f"{e:>5} {a:8.4f} {b:8.4f}" for e, a, b in zip(self.epochs, self.asr, self.ba)]
        return "\n".join(lines) + "\n"


def clean_finetune_subset(clean_train: LabeledDataset, fraction: float = DEFAULT_CLEAN_FRACTION,
                          seed: int = 0, exclude_ids=()) -> LabeledDataset:
    """Seeded ``fraction`` of the clean training split, minus ``exclude_ids``."""
    if not 0 < fraction <= 1:
        raise ParameterError("fine-tuning fraction must lie in (0, 1]")
    excluded = set(exclude_ids)
    pool = [i for i, s in enumerate(clean_train.samples) if s.id not in excluded and s.provenance != POISONED]
    n = max(1, floor_count(fraction, len(clean_train)))
    if n > len(pool):
        raise ParameterError(f"need {n} clean samples, only {len(pool)} available")
    chosen = sorted(np.random.default_rng([seed, 7]).permutation(len(pool))[:n])
    return LabeledDataset([clean_train.samples[pool[i]] for i in chosen], clean_train.num_classes,
                          "clean_train", clean_train.label_names)


def fine_tune_defense(model: TrainedModel, clean_data: LabeledDataset, epochs: int, eval_bundle,
                      lr_scale: float = DEFAULT_LR_SCALE, seed: int | None = None,
                      adapter: VCAdapterConfig | None = None) -> DefenseCurve:
    """Fine-tune a copy of ``model`` on ``clean_data`` and track ASR/BA per epoch.

    ``eval_bundle`` is ``(clean_test, trigger, y_t)``.  Row 0 is the input
    model evaluated as-is.
    """
    clean_test, trigger, y_t = eval_bundle
    if not isinstance(trigger, TriggerSpec):
        raise ParameterError("eval_bundle trigger must be a TriggerSpec")
    if epochs < 0:
        raise ParameterError("epochs must be >= 0")
    dirty = [s.id for s in clean_data.samples if s.provenance == POISONED]
    if dirty:
        raise ContractViolation(f"fine-tuning data contains poisoned samples: {dirty[:5]}")
    overlap = set(clean_data.ids) & set(clean_test.ids)
    if overlap:
        raise ContractViolation(f"fine-tuning data overlaps the evaluation set: {sorted(overlap)[:5]}")

    base = model.train_config
    config = TrainConfig(**{**base.to_dict(), "learning_rate": base.learning_rate * lr_scale, "epochs": int(epochs),
                            "seed": base.seed if seed is None else int(seed)})
    triggered = triggered_samples(clean_test, trigger, y_t, adapter)
    rows: list[tuple[int, float, float]] = []

    def record(epoch: int, snapshot: TrainedModel) -> None:
        rep = evaluate(snapshot, clean_test, trigger, y_t, adapter, triggered=triggered)
        rows.append((epoch, rep.attack_success_rate, rep.benign_accuracy))

    data = clean_data if clean_data.role == "clean_train" else clean_data.with_role("clean_train")
    tuned = train_classifier(data, model.model_spec, config, init=model.copy(), on_epoch=record)
    return DefenseCurve(
        epochs=[r[0] for r in rows],
        asr=[r[1] for r in rows],
        ba=[r[2] for r in rows],
        finetune_config=config,
        clean_subset_digest=clean_data.digest(),
        trigger_id=trigger.trigger_id,
        target_label=int(y_t),
        train_loss=[r["loss"] for r in tuned.training_log],
    )
