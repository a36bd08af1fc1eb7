"""Poison-only backdoor experiments on speech classifiers with voice-conversion triggers."""

__version__ = "0.1.0"

from .data import AudioSample, LabeledDataset, load_dataset, split_dataset  # noqa: E402
from .defense import DefenseCurve, fine_tune_defense  # noqa: E402
from .evaluation import (  # noqa: E402
    EvalReport,
    SweepResult,
    attack_success_rate,
    benign_accuracy,
    evaluate,
    quality_report,
    run_poisoning_rate_sweep,
    run_target_label_sweep,
    run_target_speech_sweep,
    scenario_matrix,
)
from .poison import PoisonPlan, build_backdoor_dataset, select_poison_subset  # noqa: E402
from .train import ModelSpec, TrainConfig, TrainedModel, load_model, predict, save_model, train_classifier  # noqa: E402
from .triggers import TriggerSpec, VCAdapterConfig, apply_trigger, badnets_trigger, surrogate_identity_shift  # noqa: E402

__all__ = [
    "AudioSample", "LabeledDataset", "load_dataset", "split_dataset",
    "DefenseCurve", "fine_tune_defense",
    "EvalReport", "SweepResult", "attack_success_rate", "benign_accuracy", "evaluate", "quality_report",
    "run_poisoning_rate_sweep", "run_target_label_sweep", "run_target_speech_sweep", "scenario_matrix",
    "PoisonPlan", "build_backdoor_dataset", "select_poison_subset",
    "ModelSpec", "TrainConfig", "TrainedModel", "load_model", "predict", "save_model", "train_classifier",
    "TriggerSpec", "VCAdapterConfig", "apply_trigger", "badnets_trigger", "surrogate_identity_shift",
]
