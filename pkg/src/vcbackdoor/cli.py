"""Command-line pipeline: mkcorpus -> poison -> train -> eval / sweep / defend / scenarios.

Every stage writes into ``<output_dir>/<stage>/`` together with a
``stamp.json`` recording the config digest, a digest of the stage inputs,
the upstream stamps it consumed and a sha256 of every file it wrote.
A stage whose stamp matches the current inputs is skipped.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .config import ExperimentConfig
from .corpus import synthesize_corpus, synthesize_target_speech, write_corpus
from .data import POISONED, AudioSample, LabeledDataset, load_dataset, read_wav, split_dataset, write_wav
from .defense import clean_finetune_subset, fine_tune_defense
from .errors import BackdoorLabError, FormatError, MissingArtifactError, ValidationError
from .evaluation import (
    AttackSetup,
    ScorerConfig,
    SweepAborted,
    axis_setup,
    cached_point,
    evaluate,
    format_matrix,
    quality_report,
    run_poisoning_rate_sweep,
    run_target_label_sweep,
    run_target_speech_sweep,
    scenario_table,
)
from .poison import build_backdoor_dataset, read_poison_manifest, select_poison_subset, write_poison_manifest
from .train import checkpoint_meta, load_model, save_model, train_classifier

log = logging.getLogger("vcbackdoor")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, EXIT_MISSING, EXIT_LOCKED = 0, 1, 2, 3, 4
STAMP = "stamp.json"
QUALITY_COMMAND_ENV = "VCBACKDOOR_QUALITY_COMMAND"
STAGES = ("poison", "train", "eval", "sweep", "defense", "scenarios")


class LockBusy(BackdoorLabError):
    pass


# --------------------------------------------------------------------------
# digests and stamps
# --------------------------------------------------------------------------

def _hash(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def _write_text(path, text: str, config_digest: str) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(f"# config_digest: {config_digest}\n" + text, encoding="utf-8")
    tmp.replace(path)
    return path


def write_stamp(stage_dir, stage: str, cfg: ExperimentConfig, stage_digest: str, files, upstream=None) -> Path:
    stage_dir = Path(stage_dir)
    doc = {
        "stage": stage,
        "config_digest": cfg.digest(),
        "stage_digest": stage_digest,
        "upstream": upstream or {},
        "files": {Path(f).relative_to(stage_dir).as_posix(): file_sha256(f) for f in sorted(map(str, files))},
        "version": __version__,
    }
    return _write_json(stage_dir / STAMP, doc)


def read_stamp(stage_dir) -> dict | None:
    path = Path(stage_dir) / STAMP
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt stamp {path}: {exc}") from exc


def stamp_problems(stage_dir, stamp: dict) -> list[str]:
    """Files listed in ``stamp`` that are missing or whose hash changed."""
    problems = []
    for rel, digest in stamp["files"].items():
        p = Path(stage_dir) / rel
        if not p.exists():
            problems.append(f"missing {p}")
        elif file_sha256(p) != digest:
            problems.append(f"hash mismatch {p}")
    return problems


def _is_current(stage_dir, stage_digest: str) -> bool:
    stamp = read_stamp(stage_dir)
    return bool(stamp) and stamp["stage_digest"] == stage_digest and not stamp_problems(stage_dir, stamp)


def _require(stage_dir, stage: str, expected_digest: str | None = None) -> dict:
    stamp = read_stamp(stage_dir)
    if stamp is None:
        raise MissingArtifactError(f"no {stage} output in {stage_dir}; run {stage} first")
    if expected_digest is not None and stamp["stage_digest"] != expected_digest:
        raise MissingArtifactError(f"{stage} output in {stage_dir} is stale for this config; run {stage} first")
    problems = stamp_problems(stage_dir, stamp)
    if problems:
        raise MissingArtifactError(f"{stage} output is damaged ({problems[0]}); run {stage} again")
    return stamp


# --------------------------------------------------------------------------
# shared pipeline state
# --------------------------------------------------------------------------

class Run:
    """Resolved config plus lazily loaded data and stage digests."""

    def __init__(self, cfg: ExperimentConfig, jobs: int = 1):
        self.cfg = cfg
        self.jobs = max(1, int(jobs))
        self.out = cfg.out_path
        self._splits = None

    def dir(self, stage: str) -> Path:
        return self.out / stage

    @property
    def splits(self) -> tuple[LabeledDataset, LabeledDataset]:
        if self._splits is None:
            ds = load_dataset(self.cfg.manifest_path)
            self._splits = split_dataset(ds, self.cfg.dataset.split_fraction, self.cfg.dataset.split_seed)
        return self._splits

    @property
    def adapter(self):
        return self.cfg.adapter_config()

    def poison_digest(self) -> str:
        train, test = self.splits
        return _hash("poison", train.digest(), test.digest(), asdict(self.cfg.poison))

    def train_digest(self) -> str:
        return _hash("train", self.poison_digest(), asdict(self.cfg.model), asdict(self.cfg.train))

    def eval_digest(self) -> str:
        return _hash("eval", self.train_digest(), os.environ.get(QUALITY_COMMAND_ENV))

    def scenarios_digest(self) -> str:
        return _hash("scenarios", self.train_digest(), self.cfg.evaluation.probes)

    def defense_digest(self) -> str:
        return _hash("defense", self.train_digest(), asdict(self.cfg.evaluation.defense))

    def sweep_digest(self) -> str:
        train, test = self.splits
        return _hash("sweep", train.digest(), test.digest(), asdict(self.cfg.poison), asdict(self.cfg.model),
                     asdict(self.cfg.train), asdict(self.cfg.evaluation.sweep))

    def stamp_ref(self, stage: str) -> dict:
        return {stage: read_stamp(self.dir(stage))["stage_digest"]}

    # -- artifacts ------------------------------------------------------------

    def backdoor_dataset(self) -> LabeledDataset:
        """D_b rebuilt from the clean split and the stored poisoned audio."""
        _require(self.dir("poison"), "poison", self.poison_digest())
        train, _ = self.splits
        manifest = self.dir("poison") / "poison_manifest.json"
        plan, doc = read_poison_manifest(manifest, train)
        rows = {r["id"]: r for r in doc["samples"]}
        samples = []
        for s in train.samples:
            row = rows[s.id]
            if row["provenance"] == POISONED:
                wav, sr = read_wav(manifest.parent / row["audio"])
                s = AudioSample(s.id, wav, sr, plan.target_label, s.speaker_id, POISONED, plan.trigger.trigger_id,
                                {"source_label": row.get("source_label")})
            if s.digest() != row["digest"]:
                raise FormatError(f"{manifest}: sample {s.id!r} does not match its recorded digest")
            samples.append(s)
        return LabeledDataset(samples, train.num_classes, "backdoor_train", train.label_names)

    def model(self):
        _require(self.dir("train"), "train", self.train_digest())
        return load_model(self.dir("train") / "model.npz")


def _quantise(ds: LabeledDataset) -> LabeledDataset:
    """Round poisoned waveforms to float32 so stored audio reloads bit-exactly."""
    samples = [s.with_waveform(s.waveform.astype(np.float32).astype(np.float64)) if s.provenance == POISONED else s
               for s in ds.samples]
    return LabeledDataset(samples, ds.num_classes, ds.role, ds.label_names)


def _savefig(fig, path, cfg: ExperimentConfig) -> Path:
    fig.savefig(path, metadata={"Description": f"config_digest={cfg.digest()}"})
    import matplotlib.pyplot as plt

    plt.close(fig)
    return Path(path)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_poison(run: Run, dry_run: bool = False) -> int:
    cfg = run.cfg
    train, _ = run.splits
    p = cfg.poison
    plan = select_poison_subset(train, p.rate, p.target_label, p.seed, p.exclude_target_class, cfg.trigger_spec())
    print(f"poison plan: N={len(train)} n={plan.n} ids={len(plan.poison_ids)} y_t={plan.target_label} "
          f"trigger={plan.trigger.trigger_id} seed={plan.seed}")
    if dry_run:
        return EXIT_OK
    stage_dir = run.dir("poison")
    digest = run.poison_digest()
    if _is_current(stage_dir, digest):
        print(f"poison: up to date ({stage_dir})")
        return EXIT_OK
    backdoor = _quantise(build_backdoor_dataset(train, plan, run.adapter, jobs=run.jobs))
    manifest = write_poison_manifest(plan, backdoor, stage_dir / "poison_manifest.json", stage_dir / "audio",
                                     extra={"config_digest": cfg.digest(), "stage_digest": digest})
    doc = json.loads(manifest.read_text())
    files = [manifest] + [stage_dir / r["audio"] for r in doc["samples"] if "audio" in r]
    write_stamp(stage_dir, "poison", cfg, digest, files)
    print(f"poison: wrote {manifest} ({plan.n} poisoned samples, dataset digest {doc['dataset_digest'][:12]})")
    return EXIT_OK


def cmd_train(run: Run, dry_run: bool = False) -> int:
    cfg = run.cfg
    backdoor = run.backdoor_dataset()
    spec, tconf = cfg.model_spec(backdoor.num_classes), cfg.train_config()
    n_poison = sum(s.provenance == POISONED for s in backdoor.samples)
    print(f"train: {len(backdoor)} samples ({n_poison} poisoned), {spec.architecture}, "
          f"{tconf.epochs} epochs, lr {tconf.learning_rate}, seed {tconf.seed}")
    if dry_run:
        return EXIT_OK
    stage_dir = run.dir("train")
    digest = run.train_digest()
    if _is_current(stage_dir, digest):
        print(f"train: up to date ({stage_dir})")
        return EXIT_OK

    def progress(epoch, snapshot):
        row = snapshot.training_log[-1]
        log.info("epoch %d: loss %.4f acc %.4f", epoch, row["loss"], row["accuracy"])

    model = train_classifier(backdoor, spec, tconf, on_epoch=progress)
    ckpt = save_model(model, stage_dir / "model.npz", extra={"config_digest": cfg.digest(), "stage_digest": digest})
    tlog = _write_json(stage_dir / "training_log.json", {"config_digest": cfg.digest(), "stage_digest": digest,
                                                         "dataset_digest": model.dataset_digest,
                                                         "training_log": model.training_log})
    write_stamp(stage_dir, "train", cfg, digest, [ckpt, tlog], run.stamp_ref("poison"))
    print(f"train: wrote {ckpt} (final loss {model.training_log[-1]['loss']:.4f})")
    return EXIT_OK


def cmd_eval(run: Run, dry_run: bool = False) -> int:
    cfg = run.cfg
    model = run.model()
    _, test = run.splits
    trigger, y_t = cfg.trigger_spec(), cfg.poison.target_label
    print(f"eval: {len(test)} test samples, trigger {trigger.trigger_id}, y_t={y_t}")
    if dry_run:
        return EXIT_OK
    stage_dir = run.dir("eval")
    digest = run.eval_digest()
    if _is_current(stage_dir, digest):
        print(f"eval: up to date ({stage_dir})")
        return EXIT_OK
    report = evaluate(model, test, trigger, y_t, run.adapter)

    backdoor = run.backdoor_dataset()
    train, _ = run.splits
    originals = train.by_id()
    poisoned = [s for s in backdoor.samples if s.provenance == POISONED][:20]
    scorer_cmd = os.environ.get(QUALITY_COMMAND_ENV)
    quality = quality_report([originals[s.id] for s in poisoned], poisoned,
                             ScorerConfig(scorer_cmd) if scorer_cmd else None)

    stage_dir.mkdir(parents=True, exist_ok=True)
    meta = {"config_digest": cfg.digest(), "stage_digest": digest}
    rep_path = _write_json(stage_dir / "report.json", {**meta, "report": report.to_dict()})
    q_path = _write_json(stage_dir / "quality.json", {**meta, "quality": quality.to_dict()})
    table = (f"{'metric':<28}{'value':>10}\n{'benign accuracy (BA)':<28}{report.benign_accuracy:10.4f}\n"
             f"{'attack success rate (ASR)':<28}{report.attack_success_rate:10.4f}\n"
             f"{'n benign':<28}{report.n_eval_benign:10d}\n{'n attack':<28}{report.n_eval_attack:10d}\n"
             f"{'quality ' + quality.scorer.split(' ')[0]:<28}"
             f"{quality.mean_poisoned if quality.mean_poisoned is not None else float('nan'):10.2f}\n")
    txt = _write_text(stage_dir / "report.txt", table, cfg.digest())
    write_stamp(stage_dir, "eval", cfg, digest, [rep_path, q_path, txt], run.stamp_ref("train"))
    print(table, end="")
    return EXIT_OK


def _base_setup(run: Run) -> AttackSetup:
    cfg = run.cfg
    train, test = run.splits
    return AttackSetup(train, test, cfg.trigger_spec(), cfg.poison.target_label, cfg.poison.rate,
                       cfg.model_spec(train.num_classes), cfg.train_config(), cfg.poison.exclude_target_class,
                       run.adapter)


def _axis_trigger(cfg: ExperimentConfig, axis: str, value):
    if axis != "target_speech":
        return None
    return cfg._trigger({**cfg.poison.trigger, "target_speech_path": value})


def _sweep_worker(args):
    cfg_doc, base_dir, axis, value, seed, store = args
    run = Run(ExperimentConfig.from_dict(cfg_doc, base_dir))
    setup = axis_setup(_base_setup(run), axis, value, _axis_trigger(run.cfg, axis, value))
    return cached_point(setup, axis, value, seed, store)[1]


def cmd_sweep(run: Run, dry_run: bool = False) -> int:
    cfg = run.cfg
    sw = cfg.evaluation.sweep
    stage_dir = run.dir("sweep")
    store = stage_dir / "points"
    digest = run.sweep_digest()
    print(f"sweep: axis {sw.axis}, values {sw.values}, seeds {sw.seeds} "
          f"({len(sw.values) * len(sw.seeds)} points)")
    if dry_run:
        done = len(list(store.glob("*.json"))) if store.exists() else 0
        print(f"sweep: {done} point files already stored")
        return EXIT_OK
    if _is_current(stage_dir, digest):
        print(f"sweep: up to date ({stage_dir})")
        return EXIT_OK

    base = _base_setup(run)
    if run.jobs > 1:
        tasks = [(cfg.to_dict(), cfg.base_dir, sw.axis, v, s, str(store)) for v in sw.values for s in sw.seeds]
        with ProcessPoolExecutor(max_workers=run.jobs) as pool:
            trained_parallel = sum(pool.map(_sweep_worker, tasks))
    else:
        trained_parallel = 0
    try:
        if sw.axis == "poisoning_rate":
            result = run_poisoning_rate_sweep(sw.values, base, sw.seeds, store)
        elif sw.axis == "target_label":
            result = run_target_label_sweep(sw.values, base, sw.seeds, store)
        else:
            result = run_target_speech_sweep({str(v): _axis_trigger(cfg, sw.axis, v) for v in sw.values},
                                             base, sw.seeds, store)
    except SweepAborted as exc:
        print(f"sweep aborted after {len(exc.completed)} completed points; rerun to resume", file=sys.stderr)
        raise
    trainings = result.trainings + trained_parallel
    resumed = len(result.points) - trainings
    print(f"sweep: {trainings} trainings, {resumed} points resumed")

    meta = {"config_digest": cfg.digest(), "stage_digest": digest}
    res_path = _write_json(stage_dir / "sweep.json", {**meta, "sweep": result.to_dict()})
    txt = _write_text(stage_dir / "sweep.txt", result.table(), cfg.digest())
    png = _plot_sweep(result, stage_dir / "sweep.png", cfg)
    points = sorted(store.glob("*.json"))
    write_stamp(stage_dir, "sweep", cfg, digest, [res_path, txt, png, *points])
    print(result.table(), end="")
    return EXIT_OK


def _plot_sweep(result, path, cfg) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = result.summary()
    xs = list(range(len(rows))) if result.axis == "target_speech" else [r["value"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key, label in (("asr", "ASR"), ("ba", "BA")):
        ax.errorbar(xs, [100 * r[f"{key}_mean"] for r in rows], yerr=[100 * r[f"{key}_std"] for r in rows],
                    marker="o", capsize=3, label=label)
    if result.axis == "target_speech":
        ax.set_xticks(xs, [Path(str(r["value"])).stem for r in rows], rotation=30)
    ax.set_xlabel(result.axis.replace("_", " "))
    ax.set_ylabel("%")
    ax.set_ylim(-2, 102)
    ax.legend()
    fig.tight_layout()
    return _savefig(fig, path, cfg)


def cmd_defend(run: Run, dry_run: bool = False) -> int:
    cfg = run.cfg
    d = cfg.evaluation.defense
    model = run.model()
    train, test = run.splits
    clean = clean_finetune_subset(train, d.clean_fraction, d.seed, exclude_ids=test.ids)
    print(f"defend: fine-tune on {len(clean)} clean samples for {d.epochs} epochs (lr x{d.lr_scale})")
    if dry_run:
        return EXIT_OK
    stage_dir = run.dir("defense")
    digest = run.defense_digest()
    if _is_current(stage_dir, digest):
        print(f"defend: up to date ({stage_dir})")
        return EXIT_OK
    curve = fine_tune_defense(model, clean, d.epochs, (test, cfg.trigger_spec(), cfg.poison.target_label),
                              lr_scale=d.lr_scale, seed=d.seed, adapter=run.adapter)
    stage_dir.mkdir(parents=True, exist_ok=True)
    meta = {"config_digest": cfg.digest(), "stage_digest": digest}
    c_path = _write_json(stage_dir / "curve.json", {**meta, "curve": curve.to_dict()})
    txt = _write_text(stage_dir / "curve.txt", curve.table(), cfg.digest())

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(curve.epochs, [100 * a for a in curve.asr], marker="o", label="ASR")
    ax.plot(curve.epochs, [100 * b for b in curve.ba], marker="s", label="BA")
    ax.set_xlabel("fine-tuning epoch")
    ax.set_ylabel("%")
    ax.set_ylim(-2, 102)
    ax.legend()
    fig.tight_layout()
    png = _savefig(fig, stage_dir / "curve.png", cfg)
    write_stamp(stage_dir, "defense", cfg, digest, [c_path, txt, png], run.stamp_ref("train"))
    print(curve.table(), end="")
    return EXIT_OK


def cmd_scenarios(run: Run, dry_run: bool = False) -> int:
    cfg = run.cfg
    model = run.model()
    _, test = run.splits
    probes = cfg.probe_specs()
    print(f"scenarios: {len(probes)} probes on {len(test)} test samples")
    if dry_run:
        return EXIT_OK
    stage_dir = run.dir("scenarios")
    digest = run.scenarios_digest()
    if _is_current(stage_dir, digest):
        print(f"scenarios: up to date ({stage_dir})")
        return EXIT_OK
    column = f"trained:{cfg.trigger_spec().trigger_id}"
    matrix = scenario_table({column: model}, probes, test, cfg.poison.target_label, run.adapter)
    stage_dir.mkdir(parents=True, exist_ok=True)
    meta = {"config_digest": cfg.digest(), "stage_digest": digest}
    m_path = _write_json(stage_dir / "matrix.json", {**meta, "probes": {k: v.to_dict() for k, v in probes.items()},
                                                     "matrix": matrix})
    txt = _write_text(stage_dir / "matrix.txt", format_matrix(matrix), cfg.digest())
    write_stamp(stage_dir, "scenarios", cfg, digest, [m_path, txt], run.stamp_ref("train"))
    print(format_matrix(matrix), end="")
    return EXIT_OK


def cmd_verify(out_dir, cfg: ExperimentConfig | None = None) -> int:
    """Re-hash every stamped file and check the embedded digests agree."""
    out_dir = Path(out_dir)
    stamps = {s: read_stamp(out_dir / s) for s in STAGES if (out_dir / s / STAMP).exists()}
    if not stamps:
        print(f"verify: no stage outputs under {out_dir}", file=sys.stderr)
        return EXIT_MISSING
    failures = []
    for stage, stamp in stamps.items():
        stage_dir = out_dir / stage
        problems = stamp_problems(stage_dir, stamp)
        for rel in stamp["files"]:
            p = stage_dir / rel
            if not p.exists():
                continue
            embedded = _embedded_digest(p)
            if embedded is not None and embedded != stamp["config_digest"]:
                problems.append(f"{p}: embedded config digest {embedded[:12]} != stamp {stamp['config_digest'][:12]}")
        for up, up_digest in stamp.get("upstream", {}).items():
            have = stamps.get(up)
            if have is None:
                problems.append(f"upstream stage {up} is missing")
            elif have["stage_digest"] != up_digest:
                problems.append(f"upstream stage {up} changed since {stage} ran")
        status = "ok" if not problems else "FAILED"
        stale = cfg is not None and stamp["config_digest"] != cfg.digest()
        print(f"verify {stage:<10} {status}  ({len(stamp['files'])} files){'  [config changed since]' if stale else ''}")
        for p in problems:
            print(f"  {p}")
        failures += problems
    return EXIT_OK if not failures else EXIT_RUNTIME


def _embedded_digest(path: Path) -> str | None:
    if path.suffix == ".json":
        doc = json.loads(path.read_text(encoding="utf-8"))
        return doc.get("config_digest") if "config_digest" in doc else None
    if path.suffix == ".txt":
        first = path.read_text(encoding="utf-8").split("\n", 1)[0]
        return first.split(":", 1)[1].strip() if first.startswith("# config_digest:") else None
    if path.suffix == ".npz":
        return checkpoint_meta(path).get("extra", {}).get("config_digest")
    if path.suffix == ".png":
        from PIL import Image

        with Image.open(path) as im:
            desc = im.info.get("Description", "")
        return desc.split("=", 1)[1] if desc.startswith("config_digest=") else None
    return None


def cmd_mkcorpus(out_dir, seed: int = 0, n_classes: int = 8, per_class: int = 100, n_speakers: int = 16,
                 duration: float = 0.5, n_targets: int = 3, dry_run: bool = False) -> int:
    out_dir = Path(out_dir)
    print(f"mkcorpus: {n_classes} classes x {per_class} samples, {n_speakers} speakers, "
          f"{duration}s clips, seed {seed} -> {out_dir}")
    if dry_run:
        return EXIT_OK
    ds = synthesize_corpus(n_classes, per_class, n_speakers, duration, seed)
    manifest = write_corpus(out_dir, ds)
    targets = []
    for t in range(n_targets):
        speaker, wav = synthesize_target_speech(seed * 1000 + t + 1, duration)
        targets.append(write_wav(out_dir / "targets" / f"target{t + 1}.wav", wav))
    cfg = ExperimentConfig()
    cfg.dataset.manifest = manifest.name
    cfg.output_dir = "runs/default"
    cfg.save(out_dir / "experiment.yaml")
    print(f"mkcorpus: wrote {manifest}, {len(targets)} target utterances and {out_dir / 'experiment.yaml'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment YAML")
    p.add_argument("--seed", type=int, help="override the poison and training seeds")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--dry-run", action="store_true", help="print the plan without writing anything")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers (trigger application, sweep points)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vcbackdoor", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("poison", "build the backdoor training set"), ("train", "train the victim model"),
                        ("eval", "benign accuracy and attack success rate"), ("sweep", "ablation sweep"),
                        ("defend", "fine-tuning defense curve"), ("scenarios", "probe-trigger ASR matrix")):
        _common(sub.add_parser(name, help=help_))
    v = sub.add_parser("verify", help="re-check stamped digests under an output directory")
    _common(v, config_required=False)
    m = sub.add_parser("mkcorpus", help="write the synthetic mini corpus")
    _common(m, config_required=False)
    m.add_argument("--classes", type=int, default=8)
    m.add_argument("--per-class", type=int, default=100)
    m.add_argument("--speakers", type=int, default=16)
    m.add_argument("--duration", type=float, default=0.5)
    m.add_argument("--targets", type=int, default=3)
    return parser


COMMANDS = {"poison": cmd_poison, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "defend": cmd_defend, "scenarios": cmd_scenarios}


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.poison.seed = args.seed
        cfg.train.seed = args.seed
        cfg.evaluation.sweep.seeds = [args.seed]
    if args.out is not None:
        cfg.output_dir = str(Path(args.out).resolve())
    cfg.check()
    return cfg


def _locked(out_dir: Path, fn):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise LockBusy(f"{out_dir} is locked by another process") from None
    try:
        return fn()
    finally:
        lock.release()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "mkcorpus":
            if not args.out:
                raise ValidationError("mkcorpus needs --out")
            out = Path(args.out)
            return _locked(out, lambda: cmd_mkcorpus(out, args.seed or 0, args.classes, args.per_class,
                                                     args.speakers, args.duration, args.targets, args.dry_run))
        if args.command == "verify":
            cfg = load_config(args) if args.config else None
            out = Path(args.out) if args.out else (cfg.out_path if cfg else None)
            if out is None:
                raise ValidationError("verify needs --out or --config")
            return cmd_verify(out, cfg)
        cfg = load_config(args)
        cfg.validate()
        run = Run(cfg, args.jobs)
        if args.dry_run:
            return COMMANDS[args.command](run, dry_run=True)
        cfg_copy = run.out / "config.yaml"
        return _locked(run.out, lambda: (cfg.save(cfg_copy), COMMANDS[args.command](run))[1])
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except LockBusy as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except ValidationError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (BackdoorLabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
