import ast
import inspect

import numpy as np
import pytest

import vcbackdoor.train as train_mod
from vcbackdoor.errors import ConfigurationError, DivergenceError, FormatError, ParameterError
from vcbackdoor.model import SmallConvNet, build_network, cross_entropy
from vcbackdoor.train import (
    ModelSpec,
    TrainConfig,
    checkpoint_meta,
    load_model,
    predict,
    predict_batch,
    save_model,
    train_classifier,
)


def numerical_gradient_check(net, params, x, y, eps=1e-6):
    logits, cache = net.forward(params, x, keep=True)
    _, dlogits = cross_entropy(logits, y)
    grads = net.backward(params, cache, dlogits)
    num, ana = [], []
    for k, p in params.items():
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + eps
            lp, _ = cross_entropy(net.forward(params, x)[0], y)
            p[i] = old - eps
            lm, _ = cross_entropy(net.forward(params, x)[0], y)
            p[i] = old
            num.append((lp - lm) / (2 * eps))
            ana.append(grads[k][i])
    num, ana = np.array(num), np.array(ana)
    return np.linalg.norm(num - ana) / max(np.linalg.norm(num) + np.linalg.norm(ana), 1e-12)


def small_net():
    net = SmallConvNet(n_mels=8, num_classes=3, channels=(2, 3), hidden=8)
    assert net.n_params() <= 500
    rng = np.random.default_rng(0)
    params = net.init_params(rng, dtype=np.float64)
    for v in params.values():
        v += 0.05 * rng.standard_normal(v.shape)  # non-zero biases exercise every path
    x = rng.standard_normal((4, 8, 10))
    y = np.array([0, 1, 2, 1])
    return net, params, x, y


def test_gradient_matches_finite_differences():
    net, params, x, y = small_net()
    assert numerical_gradient_check(net, params, x, y) <= 1e-3


def test_parameter_count_of_reference_net():
    assert SmallConvNet(40, 8).n_params() == 44536


def test_unknown_architecture():
    with pytest.raises(ValueError, match="registered"):
        build_network("resnet", 40, 8)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ModelSpec(4, input_features="raw_waveform")
    with pytest.raises(ParameterError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ParameterError):
        TrainConfig(optimizer="adam")


@pytest.fixture(scope="module")
def trained(tiny_split):
    train, _ = tiny_split
    spec = ModelSpec(num_classes=4)
    return train_classifier(train, spec, TrainConfig(epochs=4, seed=5))


def test_training_is_deterministic(trained, tiny_split):
    again = train_classifier(tiny_split[0], ModelSpec(num_classes=4), TrainConfig(epochs=4, seed=5))
    assert again.param_digest() == trained.param_digest()
    assert trained.training_log[0]["epoch"] == 0 and len(trained.training_log) == 5
    assert trained.dataset_digest == tiny_split[0].digest()


def test_training_reduces_loss(trained):
    assert trained.training_log[-1]["loss"] < trained.training_log[0]["loss"]


def test_predict_outputs(trained, tiny_split):
    _, test = tiny_split
    classes, scores = predict_batch(trained, test.samples)
    assert classes.shape == (len(test),) and scores.shape == (len(test), 4)
    np.testing.assert_allclose(scores.sum(axis=1), 1.0)
    c, s = predict(trained, test.samples[0])
    assert c == classes[0]


def test_checkpoint_round_trip(trained, tiny_split, tmp_path):
    path = save_model(trained, tmp_path / "m.npz", extra={"config_digest": "abc"})
    loaded = load_model(path)
    assert loaded.param_digest() == trained.param_digest()
    assert checkpoint_meta(path)["extra"]["config_digest"] == "abc"
    np.testing.assert_array_equal(predict_batch(loaded, tiny_split[1].samples)[1],
                                  predict_batch(trained, tiny_split[1].samples)[1])


def test_checkpoint_errors(trained, tmp_path):
    (tmp_path / "bad.npz").write_bytes(b"garbage")
    with pytest.raises(FormatError):
        load_model(tmp_path / "bad.npz")
    meta = checkpoint_meta(save_model(trained, tmp_path / "m.npz"))
    meta["format"] = "vcbackdoor-checkpoint/0"
    arrays = dict(np.load(tmp_path / "m.npz"))
    arrays["meta"] = np.frombuffer(__import__("json").dumps(meta).encode(), dtype=np.uint8)
    np.savez(tmp_path / "old.npz", **arrays)
    with pytest.raises(FormatError, match="format"):
        load_model(tmp_path / "old.npz")


def test_role_and_size_checks(tiny_split):
    _, test = tiny_split
    with pytest.raises(ParameterError):
        train_classifier(test, ModelSpec(num_classes=4), TrainConfig(epochs=1))
    with pytest.raises(ParameterError):
        train_classifier(tiny_split[0], ModelSpec(num_classes=5), TrainConfig(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected(tiny_split):
    with pytest.raises(DivergenceError):
        train_classifier(tiny_split[0], ModelSpec(num_classes=4), TrainConfig(epochs=3, learning_rate=1e6))


def test_fine_tune_keeps_normalisation(trained, tiny_split):
    out = train_classifier(tiny_split[0], trained.model_spec, TrainConfig(epochs=1), init=trained)
    np.testing.assert_array_equal(out.feat_mean, trained.feat_mean)
    assert out.param_digest() != trained.param_digest()


def test_trainer_never_imports_poisoning_code():
    tree = ast.parse(inspect.getsource(train_mod))
    imported = {n.module for n in ast.walk(tree) if isinstance(n, ast.ImportFrom) and n.module}
    assert not imported & {"triggers", "poison"}
