"""Benign accuracy, attack success rate, ablation sweeps and activation scenarios."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shlex
import subprocess
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .errors import BackdoorLabError, DegenerateSetError, ParameterError
from .poison import build_backdoor_dataset, select_poison_subset
from .train import ModelSpec, TrainConfig, TrainedModel, predict_batch, train_classifier
from .triggers import TriggerSpec, VCAdapterConfig, apply_trigger

log = logging.getLogger(__name__)

AXES = ("poisoning_rate", "target_label", "target_speech")


@dataclass
class SampleRecord:
    id: str
    ground_truth: int
    prediction: int
    triggered: bool


@dataclass
class EvalReport:
    benign_accuracy: float
    attack_success_rate: float
    per_sample: list[SampleRecord]
    target_label: int
    trigger_id: str
    n_eval_benign: int
    n_eval_attack: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_sample"] = [asdict(r) for r in self.per_sample]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        d = dict(d)
        d["per_sample"] = [SampleRecord(**r) for r in d["per_sample"]]
        return cls(**d)

    def recompute(self) -> tuple[Fraction, Fraction]:
        ba, asr = metrics_from_records(self.per_sample, self.target_label)
        return ba, asr


def metrics_from_records(records, target_label: int) -> tuple[Fraction | None, Fraction | None]:
    """Exact (BA, ASR) from per-sample records.

    BA counts untriggered records; ASR counts triggered records whose ground
    truth is not the target label.  ``None`` marks an empty denominator.
    """
    benign = [r for r in records if not r.triggered]
    attack = [r for r in records if r.triggered and r.ground_truth != target_label]
    ba = Fraction(sum(r.prediction == r.ground_truth for r in benign), len(benign)) if benign else None
    asr = Fraction(sum(r.prediction == target_label for r in attack), len(attack)) if attack else None
    return ba, asr


def predict_classes(model, samples) -> np.ndarray:
    """Class predictions from a :class:`TrainedModel` or any object with ``predict_batch``."""
    samples = list(samples)
    if not samples:
        return np.zeros(0, dtype=np.int64)
    if isinstance(model, TrainedModel):
        return predict_batch(model, samples)[0]
    if hasattr(model, "predict_batch"):
        out = model.predict_batch(samples)
        return np.asarray(out[0] if isinstance(out, tuple) else out, dtype=np.int64)
    if callable(model):
        return np.asarray(model(samples), dtype=np.int64)
    raise TypeError(f"cannot obtain predictions from {type(model).__name__}")


def triggered_samples(clean_test: LabeledDataset, trigger: TriggerSpec, y_t: int,
                      adapter: VCAdapterConfig | None = None):
    """Triggered copies of every test sample whose ground truth differs from ``y_t``."""
    eligible = [s for s in clean_test.samples if s.label != y_t]
    if not eligible:
        raise DegenerateSetError(f"every test sample already has the target label {y_t}")
    return [apply_trigger(s, trigger, adapter) for s in eligible]


def benign_accuracy(model, clean_test: LabeledDataset) -> float:
    if len(clean_test) == 0:
        raise ParameterError("benign accuracy needs a non-empty test set")
    pred = predict_classes(model, clean_test.samples)
    return float(Fraction(int((pred == clean_test.labels).sum()), len(clean_test)))


def attack_success_rate(model, clean_test: LabeledDataset, trigger: TriggerSpec, y_t: int,
                        adapter: VCAdapterConfig | None = None, triggered=None) -> float:
    """Fraction of triggered non-target test samples classified as ``y_t``.

    ``triggered`` may pass precomputed :func:`triggered_samples` output.
    """
    if len(clean_test) == 0:
        raise ParameterError("attack success rate needs a non-empty test set")
    if triggered is None:
        triggered = triggered_samples(clean_test, trigger, y_t, adapter)
    triggered = [s for s in triggered if s.label != y_t]
    if not triggered:
        raise DegenerateSetError(f"every test sample already has the target label {y_t}")
    pred = predict_classes(model, triggered)
    return float(Fraction(int((pred == y_t).sum()), len(triggered)))


def evaluate(model, clean_test: LabeledDataset, trigger: TriggerSpec, y_t: int,
             adapter: VCAdapterConfig | None = None, triggered=None) -> EvalReport:
    """BA and ASR together, with a per-sample audit trail."""
    if len(clean_test) == 0:
        raise ParameterError("evaluation needs a non-empty test set")
    if triggered is None:
        triggered = triggered_samples(clean_test, trigger, y_t, adapter)
    triggered = [s for s in triggered if s.label != y_t]
    if not triggered:
        raise DegenerateSetError(f"every test sample already has the target label {y_t}")
    pred = predict_classes(model, list(clean_test.samples) + triggered)
    n = len(clean_test)
    records = [SampleRecord(s.id, int(s.label), int(p), False) for s, p in zip(clean_test.samples, pred[:n])]
    records += [SampleRecord(s.id, int(s.label), int(p), True) for s, p in zip(triggered, pred[n:])]
    ba, asr = metrics_from_records(records, y_t)
    return EvalReport(float(ba), float(asr), records, int(y_t), trigger.trigger_id, n, len(triggered))


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

@dataclass
class AttackSetup:
    """Everything one build -> train -> evaluate point needs."""

    train_set: LabeledDataset
    test_set: LabeledDataset
    trigger: TriggerSpec
    target_label: int
    poisoning_rate: float
    model_spec: ModelSpec
    train_config: TrainConfig
    exclude_target_class: bool = True
    adapter: VCAdapterConfig | None = None

    def digest(self) -> str:
        doc = {
            "train": self.train_set.digest(), "test": self.test_set.digest(),
            "trigger": self.trigger.to_dict(), "y_t": self.target_label, "p": self.poisoning_rate,
            "model": self.model_spec.to_dict(), "config": self.train_config.to_dict(),
            "exclude": self.exclude_target_class,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class SweepPoint:
    value: object
    seed: int
    report: EvalReport


@dataclass
class SweepResult:
    axis: str
    points: list[SweepPoint]
    seeds: list[int]
    trainings: int = 0  # models actually trained in this call (resumed points excluded)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ParameterError(f"unknown sweep axis {self.axis!r}")

    def values(self) -> list:
        out = []
        for p in self.points:
            if p.value not in out:
                out.append(p.value)
        return out

    def summary(self) -> list[dict]:
        """Mean and standard deviation of BA/ASR per axis value."""
        rows = []
        for v in self.values():
            reps = [p.report for p in self.points if p.value == v]
            ba = np.array([r.benign_accuracy for r in reps])
            asr = np.array([r.attack_success_rate for r in reps])
            rows.append({"value": v, "n": len(reps), "ba_mean": float(ba.mean()), "ba_std": float(ba.std()),
                         "asr_mean": float(asr.mean()), "asr_std": float(asr.std())})
        return rows

    def table(self) -> str:
        lines = [f"{self.axis:>24} {'seed':>5} {'BA':>8} {'ASR':>8}"]
        for p in self.points:
            lines.append(f"{str(p.value):>24} {p.seed:>5} {p.report.benign_accuracy:8.4f} {p.report.attack_success_rate:8.4f}")
        lines.append("")
        lines.append(f"{self.axis:>24} {'n':>5} {'BA mean±sd':>16} {'ASR mean±sd':>16}")
        for r in self.summary():
            lines.append(f"{str(r['value']):>24} {r['n']:>5} {r['ba_mean']:8.4f}±{r['ba_std']:.4f} {r['asr_mean']:8.4f}±{r['asr_std']:.4f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"axis": self.axis, "seeds": list(self.seeds),
                "points": [{"value": p.value, "seed": p.seed, "report": p.report.to_dict()} for p in self.points],
                "summary": self.summary()}

    @classmethod
    def from_dict(cls, d: dict) -> SweepResult:
        pts = [SweepPoint(p["value"], p["seed"], EvalReport.from_dict(p["report"])) for p in d["points"]]
        return cls(d["axis"], pts, list(d["seeds"]))


class SweepAborted(BackdoorLabError):
    def __init__(self, message, completed: list[SweepPoint]):
        super().__init__(message)
        self.completed = completed


def run_point(setup: AttackSetup, seed: int) -> EvalReport:
    """Build the backdoor set, train a victim and evaluate it."""
    plan = select_poison_subset(setup.train_set, setup.poisoning_rate, setup.target_label, seed,
                                setup.exclude_target_class, setup.trigger)
    backdoor = build_backdoor_dataset(setup.train_set, plan, setup.adapter)
    config = TrainConfig(**{**setup.train_config.to_dict(), "seed": seed})
    model = train_classifier(backdoor, setup.model_spec, config)
    return evaluate(model, setup.test_set, setup.trigger, setup.target_label, setup.adapter)


def _point_path(store, axis, value, seed, digest) -> Path:
    key = hashlib.sha256(json.dumps([axis, value, seed, digest], sort_keys=True).encode()).hexdigest()[:20]
    return Path(store) / f"{axis}-{key}.json"


def cached_point(setup: AttackSetup, axis: str, value, seed: int, store=None) -> tuple[EvalReport, bool]:
    """Run one sweep point unless ``store`` already holds it; return ``(report, trained)``."""
    digest = setup.digest()
    path = _point_path(store, axis, value, seed, digest) if store is not None else None
    if path is not None and path.exists():
        log.info("sweep %s=%s seed %d: resumed from %s", axis, value, seed, path.name)
        return EvalReport.from_dict(json.loads(path.read_text())["report"]), False
    report = run_point(setup, seed)
    log.info("sweep %s=%s seed %d: trained (BA %.4f, ASR %.4f)", axis, value, seed,
             report.benign_accuracy, report.attack_success_rate)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
        tmp.write_text(json.dumps({"axis": axis, "value": value, "seed": seed, "setup_digest": digest,
                                   "report": report.to_dict()}))
        tmp.replace(path)
    return report, True


def _run_sweep(axis: str, values, make_setup, seeds, store=None) -> SweepResult:
    seeds = list(seeds)
    points, trainings = [], 0
    for value in values:
        setup = make_setup(value)
        for seed in seeds:
            try:
                report, trained = cached_point(setup, axis, value, seed, store)
            except Exception as exc:
                raise SweepAborted(f"sweep {axis}={value} seed {seed} failed: {exc}", points) from exc
            trainings += trained
            points.append(SweepPoint(value, seed, report))
    return SweepResult(axis, points, seeds, trainings)


def axis_setup(setup: AttackSetup, axis: str, value, trigger: TriggerSpec | None = None) -> AttackSetup:
    """``setup`` with the swept field replaced by ``value``."""
    if axis == "poisoning_rate":
        return AttackSetup(**{**setup.__dict__, "poisoning_rate": float(value)})
    if axis == "target_label":
        return AttackSetup(**{**setup.__dict__, "target_label": int(value)})
    if axis == "target_speech":
        if trigger is None:
            trigger = TriggerSpec(**{**setup.trigger.to_dict(), "target_speech_path": str(value)})
        return AttackSetup(**{**setup.__dict__, "trigger": trigger})
    raise ParameterError(f"unknown sweep axis {axis!r}")


def run_poisoning_rate_sweep(rates, setup: AttackSetup, seeds=(0, 1, 2, 3, 4), store=None) -> SweepResult:
    """Train and evaluate one victim per (rate, seed).

    Poison subsets are prefixes of the same seed-keyed permutation, so the
    subsets of smaller rates nest inside those of larger ones.
    """
    rates = [float(r) for r in rates]
    if any(not 0 <= r <= 1 for r in rates):
        raise ParameterError("poisoning rates must lie in [0, 1]")
    if rates != sorted(rates):
        raise ParameterError("poisoning rates must be sorted")
    return _run_sweep("poisoning_rate", rates,
                      lambda r: axis_setup(setup, "poisoning_rate", r), seeds, store)


def run_target_label_sweep(labels, setup: AttackSetup, seeds=(0, 1, 2, 3, 4), store=None) -> SweepResult:
    labels = sorted(int(v) for v in labels)
    return _run_sweep("target_label", labels,
                      lambda y: axis_setup(setup, "target_label", y), seeds, store)


def run_target_speech_sweep(triggers, setup: AttackSetup, seeds=(0, 1, 2, 3, 4), store=None) -> SweepResult:
    """Sweep over target utterances.

    ``triggers`` maps an axis label (e.g. the target speech path) to the
    :class:`TriggerSpec` built from it; points are ordered by label.
    """
    if not isinstance(triggers, dict):
        triggers = {str(t.target_speech_path or t.trigger_id): t for t in triggers}
    labels = sorted(triggers)
    return _run_sweep("target_speech", labels,
                      lambda k: axis_setup(setup, "target_speech", k, triggers[k]), seeds, store)


# --------------------------------------------------------------------------
# activation scenarios
# --------------------------------------------------------------------------

def scenario_matrix(model, probe_triggers, clean_probe: LabeledDataset, y_t: int,
                    adapter: VCAdapterConfig | None = None) -> dict[str, float]:
    """ASR of one backdoored model under each probe trigger.

    ``probe_triggers`` is a list of :class:`TriggerSpec` or a name -> spec
    mapping.  A ``kind="none"`` probe measures clean speech directly.
    """
    if not probe_triggers:
        raise ParameterError("scenario matrix needs at least one probe")
    if not isinstance(probe_triggers, dict):
        probe_triggers = {t.trigger_id if t.kind != "none" else "clean": t for t in probe_triggers}
    return {name: attack_success_rate(model, clean_probe, spec, y_t, adapter)
            for name, spec in probe_triggers.items()}


def scenario_table(models: dict, probe_triggers: dict, clean_probe: LabeledDataset, y_t: int,
                   adapter: VCAdapterConfig | None = None) -> dict[str, dict[str, float]]:
    """Probe x model ASR matrix (rows: probes, columns: backdoored models)."""
    columns = {name: scenario_matrix(m, probe_triggers, clean_probe, y_t, adapter) for name, m in models.items()}
    return {probe: {col: columns[col][probe] for col in columns} for probe in probe_triggers}


def format_matrix(matrix: dict[str, dict[str, float]]) -> str:
    cols = list(next(iter(matrix.values())).keys()) if matrix else []
    width = max([len(r) for r in matrix] + [5])
    lines = [" " * width + "".join(f"{c:>14}" for c in cols)]
    for row, vals in matrix.items():
        lines.append(f"{row:<{width}}" + "".join(f"{100 * vals[c]:14.2f}" for c in cols))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# perceptual quality
# --------------------------------------------------------------------------

PROXY_NAME = "smr-proxy (signal-to-modification ratio, dB; not NISQA)"
PROXY_MAX_DB = 100.0


def modification_ratio_db(clean, poisoned) -> float:
    """Clean energy over modification energy in dB, capped at 100 dB."""
    clean = np.asarray(clean, dtype=np.float64)
    poisoned = np.asarray(poisoned, dtype=np.float64)
    n = min(clean.size, poisoned.size)
    diff = np.sum((clean[:n] - poisoned[:n]) ** 2)
    sig = np.sum(clean[:n] ** 2)
    if diff == 0:
        return PROXY_MAX_DB
    return float(min(PROXY_MAX_DB, 10 * np.log10(max(sig, 1e-300) / diff)))


@dataclass(frozen=True)
class ScorerConfig:
    """External quality scorer: ``{audio}`` placeholder, prints one number on stdout."""

    invocation: str
    timeout: float = 60.0
    workdir: str = "."


def _external_score(path, config: ScorerConfig) -> float:
    cmd = config.invocation.format(audio=shlex.quote(str(path)))
    proc = subprocess.run(shlex.split(cmd), capture_output=True, text=True, timeout=config.timeout, cwd=config.workdir)
    if proc.returncode != 0:
        raise RuntimeError(f"scorer exited {proc.returncode}: {proc.stderr.strip()[:500]}")
    value = float(proc.stdout.strip().split()[-1])
    if not math.isfinite(value):
        raise RuntimeError("scorer returned a non-finite value")
    return value


@dataclass
class QualityReport:
    scorer: str
    pairs: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    @property
    def mean_clean(self):
        vals = [p["clean"] for p in self.pairs if p.get("clean") is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_poisoned(self):
        vals = [p["poisoned"] for p in self.pairs if p.get("poisoned") is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_delta(self):
        vals = [p["delta"] for p in self.pairs if p.get("delta") is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {"scorer": self.scorer, "pairs": self.pairs, "failures": self.failures,
                "mean_clean": self.mean_clean, "mean_poisoned": self.mean_poisoned, "mean_delta": self.mean_delta}


def quality_report(clean_samples, poisoned_samples, scorer: ScorerConfig | None = None,
                   tmpdir=None) -> QualityReport:
    """Paired quality scores for clean/poisoned utterances.

    Without a scorer the built-in proxy is used: each pair gets the
    signal-to-modification ratio of the poisoned version (clean is scored
    as identical to itself).
    """
    clean_samples, poisoned_samples = list(clean_samples), list(poisoned_samples)
    if len(clean_samples) != len(poisoned_samples):
        raise ParameterError("clean and poisoned lists must pair up")
    if scorer is None:
        report = QualityReport(PROXY_NAME)
        for c, p in zip(clean_samples, poisoned_samples):
            smr = modification_ratio_db(c.waveform, p.waveform)
            report.pairs.append({"id": c.id, "poisoned_id": p.id, "clean": PROXY_MAX_DB, "poisoned": smr,
                                 "delta": smr - PROXY_MAX_DB})
        return report

    from tempfile import TemporaryDirectory

    from .data import write_wav

    report = QualityReport(f"external: {scorer.invocation}")
    with TemporaryDirectory(dir=tmpdir) as tmp:
        for i, (c, p) in enumerate(zip(clean_samples, poisoned_samples)):
            row = {"id": c.id, "poisoned_id": p.id}
            try:
                row["clean"] = _external_score(write_wav(Path(tmp) / f"{i}_c.wav", c.waveform, c.sample_rate), scorer)
                row["poisoned"] = _external_score(write_wav(Path(tmp) / f"{i}_p.wav", p.waveform, p.sample_rate), scorer)
                row["delta"] = row["poisoned"] - row["clean"]
                report.pairs.append(row)
            except Exception as exc:
                report.failures.append({"id": c.id, "error": str(exc)})
    return report
