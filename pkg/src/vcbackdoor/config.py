"""Experiment configuration: a versioned YAML document with a stable digest."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigurationError, SchemaError
from .train import ModelSpec, TrainConfig
from .triggers import TriggerSpec, VCAdapterConfig

SCHEMA_VERSION = 1

# Desk-scale defaults for the synthetic corpus.
DEFAULT_TRIGGER = {"kind": "surrogate_identity_shift",
                   "shift_params": {"ratio": 1.2, "band_weights": [0.5, 0.5, 3.0, 3.0]}}
DEFAULT_PROBES = {
    "training-trigger": DEFAULT_TRIGGER,
    "same-source-variant": {"kind": "surrogate_identity_shift",
                            "shift_params": {"ratio": 1.18, "band_weights": [0.6, 0.5, 2.7, 3.0]}},
    "different-source": {"kind": "surrogate_identity_shift",
                         "shift_params": {"ratio": 0.8, "band_weights": [3.0, 3.0, 0.5, 0.5]}},
    "clean": {"kind": "none"},
}


@dataclass
class DatasetSection:
    manifest: str = "corpus/manifest.csv"
    split_fraction: float = 0.9
    split_seed: int = 0


@dataclass
class PoisonSection:
    rate: float = 0.05
    target_label: int = 0
    seed: int = 0
    exclude_target_class: bool = True
    trigger: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_TRIGGER))


@dataclass
class ModelSection:
    architecture: str = "small_conv"
    input_features: str = "log_mel"
    n_mels: int = 40
    channels: list = field(default_factory=lambda: [8, 32])
    hidden: int = 128


@dataclass
class TrainSection:
    optimizer: str = "sgd"
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    loss: str = "cross_entropy"
    momentum: float = 0.9


@dataclass
class SweepSection:
    axis: str = "poisoning_rate"
    values: list = field(default_factory=lambda: [0.0, 0.01, 0.02, 0.05, 0.1])
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class DefenseSection:
    epochs: int = 20
    lr_scale: float = 0.1
    clean_fraction: float = 0.1
    seed: int = 0


@dataclass
class EvaluationSection:
    sweep: SweepSection = field(default_factory=SweepSection)
    probes: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_PROBES))
    defense: DefenseSection = field(default_factory=DefenseSection)


@dataclass
class AdapterSection:
    invocation: str | None = None
    timeout: float = 120.0
    version: str = "1"
    max_parallel: int = 1
    cache_dir: str | None = None


_NESTED = {"sweep": SweepSection, "defense": DefenseSection}


def _section(cls, doc, where: str):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: expected a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise SchemaError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in doc.items():
        kwargs[k] = _section(_NESTED[k], v, f"{where}.{k}") if k in _NESTED and cls is EvaluationSection else v
    return cls(**kwargs)


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    poison: PoisonSection = field(default_factory=PoisonSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    vc_adapter: AdapterSection = field(default_factory=AdapterSection)
    output_dir: str = "runs/default"
    schema_version: int = SCHEMA_VERSION
    base_dir: str = field(default=".", compare=False, repr=False)  # resolves relative paths; not serialised

    _SECTIONS = {"dataset": DatasetSection, "poison": PoisonSection, "model": ModelSection,
                 "train": TrainSection, "evaluation": EvaluationSection, "vc_adapter": AdapterSection}

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> ExperimentConfig:
        if not isinstance(doc, dict):
            raise SchemaError("config must be a mapping")
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
        unknown = set(doc) - set(cls._SECTIONS) - {"output_dir", "schema_version"}
        if unknown:
            raise SchemaError(f"unknown top-level keys {sorted(unknown)}")
        kwargs = {k: _section(c, doc.get(k), k) for k, c in cls._SECTIONS.items()}
        cfg = cls(**kwargs, output_dir=str(doc.get("output_dir", "runs/default")),
                  schema_version=version, base_dir=str(base_dir))
        cfg.check()
        return cfg

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text: str, base_dir=".") -> ExperimentConfig:
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise SchemaError(f"config is not valid YAML: {exc}") from exc
        return cls.from_dict(doc, base_dir)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text, base_dir=path.parent)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    # -- typed views ---------------------------------------------------------

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def manifest_path(self) -> Path:
        return self.resolve(self.dataset.manifest)

    @property
    def out_path(self) -> Path:
        return self.resolve(self.output_dir)

    def _trigger(self, doc: dict) -> TriggerSpec:
        doc = dict(doc)
        if doc.get("target_speech_path"):
            doc["target_speech_path"] = str(self.resolve(doc["target_speech_path"]))
        try:
            return TriggerSpec.from_dict(doc)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"bad trigger {doc}: {exc}") from exc

    def trigger_spec(self) -> TriggerSpec:
        return self._trigger(self.poison.trigger)

    def probe_specs(self) -> dict[str, TriggerSpec]:
        return {name: self._trigger(doc) for name, doc in self.evaluation.probes.items()}

    def model_spec(self, num_classes: int) -> ModelSpec:
        return ModelSpec(num_classes=num_classes, **asdict(self.model))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**asdict(self.train))

    def adapter_config(self) -> VCAdapterConfig | None:
        a = self.vc_adapter
        try:
            base = VCAdapterConfig.from_env(a.invocation, workdir=str(self.out_path / "vc"), timeout=a.timeout,
                                            version=a.version, max_parallel=a.max_parallel,
                                            cache_dir=str(self.resolve(a.cache_dir)) if a.cache_dir else None)
        except ConfigurationError:
            return None
        return base

    def needs_adapter(self) -> bool:
        specs = [self.poison.trigger, *self.evaluation.probes.values()]
        return any(s.get("kind") == "voice_conversion" for s in specs)

    # -- validation ----------------------------------------------------------

    def check(self) -> None:
        """Structural checks that do not touch the filesystem."""
        if not 0 < self.dataset.split_fraction < 1:
            raise SchemaError("dataset.split_fraction must lie in (0, 1)")
        if not 0 <= self.poison.rate <= 1:
            raise SchemaError("poison.rate must lie in [0, 1]")
        if self.evaluation.sweep.axis not in ("poisoning_rate", "target_label", "target_speech"):
            raise SchemaError(f"unknown sweep axis {self.evaluation.sweep.axis!r}")
        if not self.evaluation.sweep.seeds:
            raise SchemaError("evaluation.sweep.seeds must not be empty")
        try:
            self.trigger_spec()
            self.probe_specs()
            self.train_config()
            self.model_spec(2)
        except SchemaError:
            raise
        except (TypeError, ValueError) as exc:
            raise SchemaError(str(exc)) from exc

    def validate(self) -> None:
        """Full validation: structure plus existence of every referenced path."""
        self.check()
        if not self.manifest_path.exists():
            raise ConfigurationError(f"dataset manifest not found: {self.manifest_path}")
        specs = [self.trigger_spec(), *self.probe_specs().values()]
        if self.evaluation.sweep.axis == "target_speech":
            specs += [self._trigger({**self.poison.trigger, "target_speech_path": v})
                      for v in self.evaluation.sweep.values]
        for s in specs:
            if s.kind == "voice_conversion" and not Path(s.target_speech_path).exists():
                raise ConfigurationError(f"target speech not found: {s.target_speech_path}")
        if self.needs_adapter() and self.adapter_config() is None:
            raise ConfigurationError("a voice_conversion trigger needs vc_adapter.invocation "
                                     "or the VCBACKDOOR_VC_COMMAND environment variable")
