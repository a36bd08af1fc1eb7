"""Empirical-risk-minimisation training harness and model checkpoints.

The trainer is deliberately standard: it sees only a dataset of samples and
labels plus its own configuration, and never touches trigger or poisoning
state.
"""

from __future__ import annotations

import json
import logging
import zipfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import AudioSample, LabeledDataset
from .dsp import LOG_FLOOR, log_mel_features
from .errors import (
    ConfigurationError,
    DivergenceError,
    FormatError,
    ParameterError,
    PredictionError,
    TrainingError,
)
from .model import build_network, cross_entropy, softmax

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "vcbackdoor-checkpoint/1"
TRAINABLE_ROLES = ("clean_train", "backdoor_train")


@dataclass
class ModelSpec:
    num_classes: int
    architecture: str = "small_conv"
    input_features: str = "log_mel"
    n_mels: int = 40
    channels: tuple[int, int] = (8, 32)
    hidden: int = 128

    def __post_init__(self):
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if self.input_features not in ("log_mel", "raw_waveform"):
            raise ParameterError(f"unknown input_features {self.input_features!r}")
        if self.architecture == "small_conv" and self.input_features != "log_mel":
            raise ConfigurationError("small_conv consumes log_mel features")
        self.channels = tuple(int(c) for c in self.channels)

    def build(self):
        return build_network(self.architecture, self.n_mels, self.num_classes,
                             channels=self.channels, hidden=self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    loss: str = "cross_entropy"
    momentum: float = 0.9

    def __post_init__(self):
        if self.optimizer != "sgd":
            raise ParameterError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss != "cross_entropy":
            raise ParameterError(f"unsupported loss {self.loss!r}")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ParameterError("momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainedModel:
    params: dict[str, np.ndarray]
    model_spec: ModelSpec
    train_config: TrainConfig
    dataset_digest: str
    feat_mean: np.ndarray
    feat_std: np.ndarray
    input_frames: int
    training_log: list[dict] = field(default_factory=list)

    def copy(self) -> TrainedModel:
        return TrainedModel(
            params={k: v.copy() for k, v in self.params.items()},
            model_spec=self.model_spec,
            train_config=self.train_config,
            dataset_digest=self.dataset_digest,
            feat_mean=self.feat_mean.copy(),
            feat_std=self.feat_std.copy(),
            input_frames=self.input_frames,
            training_log=[dict(r) for r in self.training_log],
        )

    def param_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# features
# --------------------------------------------------------------------------

_FEATURE_CACHE: OrderedDict = OrderedDict()
_FEATURE_CACHE_MAX = 8000


def sample_features(sample: AudioSample, n_mels: int) -> np.ndarray:
    key = (sample.digest(), n_mels)
    hit = _FEATURE_CACHE.get(key)
    if hit is not None:
        _FEATURE_CACHE.move_to_end(key)
        return hit
    try:
        feats = log_mel_features(sample.waveform, sample.sample_rate, n_mels).astype(np.float32)
    except Exception as exc:
        raise TrainingError(f"feature extraction failed for sample {sample.id!r}: {exc}",
                            sample_id=sample.id) from exc
    feats.setflags(write=False)
    _FEATURE_CACHE[key] = feats
    if len(_FEATURE_CACHE) > _FEATURE_CACHE_MAX:
        _FEATURE_CACHE.popitem(last=False)
    return feats


def _fit_frames(feats: np.ndarray, frames: int) -> np.ndarray:
    if feats.shape[1] >= frames:
        return feats[:, :frames]
    pad = np.full((feats.shape[0], frames - feats.shape[1]), np.log(LOG_FLOOR), dtype=feats.dtype)
    return np.concatenate([feats, pad], axis=1)


def featurize(samples, n_mels: int, frames: int | None = None) -> np.ndarray:
    """Stack log-mel features of ``samples`` into ``(N, n_mels, frames)``."""
    feats = [sample_features(s, n_mels) for s in samples]
    if not feats:
        return np.zeros((0, n_mels, frames or 1), dtype=np.float32)
    if frames is None:
        frames = max(f.shape[1] for f in feats)
    return np.stack([_fit_frames(f, frames) for f in feats])


def _normalise(model: TrainedModel, feats: np.ndarray) -> np.ndarray:
    return ((feats - model.feat_mean[None, :, None]) / model.feat_std[None, :, None]).astype(np.float32)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _evaluate_loss(net, params, X, y, batch_size: int = 256):
    losses, correct = 0.0, 0
    for start in range(0, len(y), batch_size):
        logits, _ = net.forward(params, X[start:start + batch_size])
        loss, _ = cross_entropy(logits, y[start:start + batch_size])
        losses += loss * len(logits)
        correct += int((logits.argmax(axis=1) == y[start:start + batch_size]).sum())
    return losses / len(y), correct / len(y)


def train_classifier(dataset: LabeledDataset, model_spec: ModelSpec, train_config: TrainConfig,
                     init: TrainedModel | None = None, on_epoch=None) -> TrainedModel:
    """Minimise mean cross-entropy over ``dataset`` with mini-batch SGD.

    With ``init`` the run continues from that model's parameters and keeps
    its feature normalisation (used by fine-tuning).  ``on_epoch(epoch,
    model)`` is called after every epoch, including epoch 0 (before any
    update), with a snapshot of the model.
    """
    if dataset.role not in TRAINABLE_ROLES:
        raise ParameterError(f"cannot train on a dataset with role {dataset.role!r}")
    if len(dataset) == 0:
        raise ParameterError("cannot train on an empty dataset")
    if model_spec.num_classes != dataset.num_classes:
        raise ParameterError(
            f"model has {model_spec.num_classes} classes, dataset has {dataset.num_classes}"
        )
    digest = dataset.digest()  # recorded before any parameter update
    net = model_spec.build()

    if init is None:
        feats = featurize(dataset.samples, model_spec.n_mels)
        frames = feats.shape[2]
        mean = feats.mean(axis=(0, 2))
        std = np.maximum(feats.std(axis=(0, 2)), 1e-3)
        params = net.init_params(np.random.default_rng(train_config.seed))
    else:
        frames = init.input_frames
        feats = featurize(dataset.samples, model_spec.n_mels, frames)
        mean, std = init.feat_mean, init.feat_std
        params = {k: v.copy() for k, v in init.params.items()}

    model = TrainedModel(params, model_spec, train_config, digest,
                         np.asarray(mean, dtype=np.float32), np.asarray(std, dtype=np.float32), int(frames))
    X = _normalise(model, feats)
    y = dataset.labels

    loss0, acc0 = _evaluate_loss(net, params, X, y)
    model.training_log.append({"epoch": 0, "loss": loss0, "accuracy": acc0})
    if on_epoch is not None:
        on_epoch(0, model.copy())

    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    shuffle_rng = np.random.default_rng([train_config.seed, 1])
    lr, mom, bs = np.float32(train_config.learning_rate), np.float32(train_config.momentum), train_config.batch_size
    for epoch in range(1, train_config.epochs + 1):
        order = shuffle_rng.permutation(len(y))
        total, correct = 0.0, 0
        for start in range(0, len(y), bs):
            idx = order[start:start + bs]
            logits, cache = net.forward(params, X[idx], keep=True)
            loss, dlogits = cross_entropy(logits, y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss in epoch {epoch}", epoch=epoch)
            grads = net.backward(params, cache, dlogits)
            for k in params:
                velocity[k] *= mom
                velocity[k] -= lr * grads[k].astype(params[k].dtype)
                params[k] += velocity[k]
            total += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
        row = {"epoch": epoch, "loss": total / len(y), "accuracy": correct / len(y)}
        model.training_log.append(row)
        log.debug("epoch %d loss %.4f acc %.3f", epoch, row["loss"], row["accuracy"])
        if on_epoch is not None:
            on_epoch(epoch, model.copy())
    return model


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def predict_batch(model: TrainedModel, samples, batch_size: int = 256):
    """Predicted classes ``(N,)`` and class probabilities ``(N, C)``."""
    samples = list(samples)
    net = model.model_spec.build()
    try:
        X = _normalise(model, featurize(samples, model.model_spec.n_mels, model.input_frames))
    except TrainingError as exc:
        raise PredictionError(str(exc)) from exc
    scores = np.zeros((len(samples), model.model_spec.num_classes))
    for start in range(0, len(samples), batch_size):
        logits, _ = net.forward(model.params, X[start:start + batch_size])
        scores[start:start + batch_size] = softmax(logits.astype(np.float64))
    return scores.argmax(axis=1), scores


def predict(model: TrainedModel, sample: AudioSample):
    """``(class index, score vector)`` for one sample."""
    classes, scores = predict_batch(model, [sample])
    return int(classes[0]), scores[0]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_model(model: TrainedModel, path, extra: dict | None = None) -> Path:
    """Write an ``.npz`` checkpoint; ``extra`` is stored verbatim in the metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model_spec": model.model_spec.to_dict(),
        "train_config": model.train_config.to_dict(),
        "training_log": model.training_log,
        "dataset_digest": model.dataset_digest,
        "input_frames": model.input_frames,
        "params": sorted(model.params),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays["feat_mean"] = model.feat_mean
    arrays["feat_std"] = model.feat_std
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_model(path) -> TrainedModel:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            meta = json.loads(npz["meta"].tobytes().decode())
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise FormatError(f"{path}: checkpoint format {meta.get('format')!r}, expected {CHECKPOINT_FORMAT!r}")
            params = {k: npz[f"param/{k}"].copy() for k in meta["params"]}
            mean, std = npz["feat_mean"].copy(), npz["feat_std"].copy()
        spec = ModelSpec(**meta["model_spec"])
        config = TrainConfig(**meta["train_config"])
    except FormatError:
        raise
    except (OSError, ValueError, KeyError, TypeError, zipfile.BadZipFile, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    return TrainedModel(params, spec, config, meta["dataset_digest"], mean, std,
                        int(meta["input_frames"]), meta["training_log"])


def checkpoint_meta(path) -> dict:
    """Metadata block of a checkpoint without loading its parameters."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            return json.loads(npz["meta"].tobytes().decode())
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
