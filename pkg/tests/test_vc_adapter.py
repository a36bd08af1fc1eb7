import sys

import numpy as np
import pytest

from vcbackdoor.data import AudioSample, read_wav, write_wav
from vcbackdoor.errors import AdapterTimeoutError, ConfigurationError, TriggerError
from vcbackdoor.triggers import VC_COMMAND_ENV, TriggerSpec, VCAdapter, VCAdapterConfig, apply_trigger


def mock(mode: str) -> str:
    return f"{sys.executable} -m vcbackdoor.mockvc {mode} {{source}} {{target}} {{output}}"


@pytest.fixture
def files(tmp_path):
    rng = np.random.default_rng(0)
    src = write_wav(tmp_path / "src.wav", 0.3 * rng.uniform(-1, 1, 8000))
    tgt = write_wav(tmp_path / "tgt.wav", 0.3 * rng.uniform(-1, 1, 4000))
    return src, tgt


def adapter(tmp_path, mode, **kw):
    return VCAdapter(VCAdapterConfig(mock(mode), workdir=str(tmp_path), **kw))


def test_copy_returns_source(tmp_path, files):
    src, tgt = files
    out = adapter(tmp_path, "copy").convert(src, tgt)
    np.testing.assert_array_equal(out, read_wav(src)[0])


def test_resampled_output_is_brought_back(tmp_path, files):
    src, tgt = files
    out = adapter(tmp_path, "resample").convert(src, tgt)
    ref = read_wav(src)[0]
    assert out.shape == ref.shape
    assert np.corrcoef(out, ref)[0, 1] > 0.9


def test_failure_surfaces_stderr(tmp_path, files):
    with pytest.raises(TriggerError, match="simulated conversion failure"):
        adapter(tmp_path, "fail").convert(*files)


def test_timeout(tmp_path, files):
    with pytest.raises(AdapterTimeoutError):
        adapter(tmp_path, "sleep", timeout=1.0).convert(*files)


def test_cache_prevents_second_call(tmp_path, files, monkeypatch):
    log = tmp_path / "calls.log"
    monkeypatch.setenv("MOCKVC_LOG", str(log))
    a = adapter(tmp_path, "copy")
    first = a.convert(*files)
    second = a.convert(*files)
    np.testing.assert_array_equal(first, second)
    assert a.invocations == 1
    assert len(log.read_text().splitlines()) == 1
    fresh = adapter(tmp_path, "copy")  # new adapter, same on-disk cache
    fresh.convert(*files)
    assert fresh.invocations == 0


def test_version_change_misses_cache(tmp_path, files):
    adapter(tmp_path, "copy").convert(*files)
    b = adapter(tmp_path, "copy", version="2")
    b.convert(*files)
    assert b.invocations == 1


def test_missing_target(tmp_path, files):
    with pytest.raises(ConfigurationError):
        adapter(tmp_path, "copy").convert(files[0], tmp_path / "nope.wav")


def test_env_override(monkeypatch):
    monkeypatch.setenv(VC_COMMAND_ENV, "convert {source} {target} {output}")
    assert VCAdapterConfig.from_env("default").invocation.startswith("convert")
    monkeypatch.delenv(VC_COMMAND_ENV)
    with pytest.raises(ConfigurationError):
        VCAdapterConfig.from_env(None)


def test_apply_trigger_through_adapter(tmp_path, files):
    _, tgt = files
    cfg = VCAdapterConfig(mock("shift"), workdir=str(tmp_path))
    sample = AudioSample("u1", 0.3 * np.random.default_rng(1).uniform(-1, 1, 8000), 16000, 2, "spk")
    spec = TriggerSpec("voice_conversion", target_speech_path=str(tgt), target_speaker_id="tgt")
    out = apply_trigger(sample, spec, cfg)
    assert out.provenance == "poisoned" and out.label == 2
    assert out.waveform.shape == sample.waveform.shape
    assert not np.allclose(out.waveform, sample.waveform, atol=1e-3)
