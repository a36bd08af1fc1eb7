import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcbackdoor.data import AudioSample
from vcbackdoor.dsp import istft, stft
from vcbackdoor.errors import ConfigurationError, ParameterError, SizeError
from vcbackdoor.triggers import (
    BADNETS_BINS,
    TriggerSpec,
    apply_trigger,
    badnets_pattern,
    badnets_trigger,
    default_badnets_amplitude,
    surrogate_identity_shift,
)

SHIFT = {"ratio": 1.2, "band_weights": [0.5, 0.5, 3.0, 3.0]}


def noise(n=8000, seed=0):
    return np.random.default_rng(seed).uniform(-0.5, 0.5, n)


def rel_perturbation(a, b):
    """Relative Frobenius change of STFT magnitudes in bins >= BADNETS_BINS."""
    ma, mb = stft(a).magnitudes[BADNETS_BINS:], stft(b).magnitudes[BADNETS_BINS:]
    return np.linalg.norm(ma - mb) / np.linalg.norm(ma)


def test_trigger_id_is_stable_and_content_keyed():
    a = TriggerSpec("surrogate_identity_shift", shift_params=SHIFT)
    b = TriggerSpec.from_dict(a.to_dict())
    assert a.trigger_id == b.trigger_id and a == b and hash(a) == hash(b)
    c = TriggerSpec("surrogate_identity_shift", shift_params={**SHIFT, "ratio": 1.21})
    assert c.trigger_id != a.trigger_id
    assert a.trigger_id.startswith("sur-")


def test_trigger_id_mismatch_rejected():
    doc = TriggerSpec("none").to_dict()
    doc["trigger_id"] = "non-0000"
    with pytest.raises(ParameterError):
        TriggerSpec.from_dict(doc)


def test_spec_validation():
    with pytest.raises(ParameterError):
        TriggerSpec("laser")
    with pytest.raises(ConfigurationError):
        TriggerSpec("voice_conversion")
    with pytest.raises(ParameterError):
        TriggerSpec("surrogate_identity_shift", shift_params={"ratio": 3.0})
    with pytest.raises(ParameterError):
        TriggerSpec("surrogate_identity_shift", shift_params={"band_weights": [1, 1, 1, 10]})
    with pytest.raises(ParameterError):
        TriggerSpec("surrogate_identity_shift", shift_params={"pitch": 2})


@pytest.mark.parametrize("seed", range(5))
def test_badnets_idempotent(seed):
    x = noise(seed=seed)
    once = badnets_trigger(x, 0.5)
    twice = badnets_trigger(once, 0.5)
    assert np.max(np.abs(stft(once).magnitudes - stft(twice).magnitudes)) <= 1e-3
    np.testing.assert_allclose(once, twice, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_badnets_leaves_upper_bins_alone(seed):
    x = noise(seed=seed)
    assert rel_perturbation(x, badnets_trigger(x, 0.5)) <= 1e-3


def high_band_tone(n=8000):
    t = np.arange(n) / 16000
    return 0.3 * np.sin(2 * np.pi * 2000 * t) * np.hanning(n)  # tapered: no low-band edge leakage


def test_badnets_sets_low_band_level():
    assert np.sqrt(np.mean(stft(badnets_pattern(8000, 2.0)).magnitudes[:BADNETS_BINS] ** 2)) == pytest.approx(2.0)
    y = badnets_trigger(high_band_tone(), 2.0)
    assert np.sqrt(np.mean(stft(y).magnitudes[:BADNETS_BINS] ** 2)) == pytest.approx(2.0, rel=0.01)


def test_badnets_zero_amplitude_on_high_band_input():
    x = high_band_tone()
    np.testing.assert_allclose(badnets_trigger(x, 0.0), istft(stft(x)), atol=1e-3)


def test_badnets_zero_amplitude_removes_low_band():
    t = np.arange(8000) / 16000
    x = 0.3 * np.sin(2 * np.pi * 100 * t) * np.hanning(8000)
    assert np.max(np.abs(badnets_trigger(x, 0.0))) < 1e-3


def test_badnets_errors():
    with pytest.raises(SizeError):
        badnets_trigger(np.zeros(100), 0.5)
    with pytest.raises(ParameterError):
        badnets_trigger(noise(), -1)


def test_default_amplitude_positive(tiny_corpus):
    assert default_badnets_amplitude(tiny_corpus) > 0


def test_surrogate_identity_is_round_trip():
    x = noise()
    y = surrogate_identity_shift(x, {"ratio": 1.0, "band_weights": [1, 1, 1, 1]})
    np.testing.assert_allclose(y, istft(stft(x)), atol=1e-9)


def test_surrogate_moves_tone():
    t = np.arange(8000) / 16000
    y = surrogate_identity_shift(0.3 * np.sin(2 * np.pi * 200 * t), {"ratio": 1.5})
    peak = np.argmax(stft(y).magnitudes[:, 30])
    assert abs(peak - 200 * 1.5 / (16000 / 512)) <= 1


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 2.0), st.lists(st.floats(0.25, 4.0), min_size=4, max_size=4), st.integers(512, 6000))
def test_surrogate_output_contract(ratio, weights, n):
    x = noise(n, seed=n)
    y = surrogate_identity_shift(x, {"ratio": ratio, "band_weights": weights})
    assert y.shape == x.shape
    assert np.all(np.isfinite(y)) and np.max(np.abs(y)) <= 1.0
    np.testing.assert_array_equal(y, surrogate_identity_shift(x, {"ratio": ratio, "band_weights": weights}))


def test_apply_trigger_marks_provenance():
    s = AudioSample("a", noise(), 16000, 3, "spk")
    spec = TriggerSpec("surrogate_identity_shift", shift_params=SHIFT)
    out = apply_trigger(s, spec)
    assert out.provenance == "poisoned" and out.trigger_id == spec.trigger_id
    assert out.label == 3 and out.id == "a"
    assert out.metadata["source_digest"] == s.digest()
    assert s.provenance == "clean"  # input untouched


def test_apply_none_is_copy():
    s = AudioSample("a", noise(), 16000, 1, "spk")
    out = apply_trigger(s, TriggerSpec("none"))
    np.testing.assert_array_equal(out.waveform, s.waveform)
    assert out.provenance == "clean" and out.waveform is not s.waveform


def test_voice_conversion_needs_adapter(tmp_path):
    (tmp_path / "t.wav").write_bytes(b"")
    spec = TriggerSpec("voice_conversion", target_speech_path=str(tmp_path / "t.wav"))
    with pytest.raises(ConfigurationError):
        apply_trigger(AudioSample("a", noise(), 16000, 1, "spk"), spec)
