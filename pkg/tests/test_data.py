import json

import numpy as np
import pytest

from vcbackdoor.data import (
    AudioSample,
    LabeledDataset,
    floor_count,
    load_dataset,
    read_wav,
    split_dataset,
    write_manifest,
    write_vocab,
    write_wav,
)
from vcbackdoor.errors import DatasetLoadError, DecodeError, ParameterError, SchemaError


def test_sample_clips_and_validates():
    s = AudioSample("a", np.array([2.0, -3.0, 0.5]), 16000, 0, "spk")
    np.testing.assert_array_equal(s.waveform, [1.0, -1.0, 0.5])
    with pytest.raises(ParameterError):
        AudioSample("b", np.array([np.nan]), 16000, 0, "spk")
    with pytest.raises(ParameterError):
        AudioSample("c", np.zeros(0), 16000, 0, "spk")
    with pytest.raises(ParameterError):
        AudioSample("d", np.zeros(3), 16000, 0, "spk", provenance="poisoned")


def test_dataset_schema_errors():
    a = AudioSample("a", np.zeros(3), 16000, 2, "spk")
    with pytest.raises(SchemaError):
        LabeledDataset([a], num_classes=2)
    b = AudioSample("a", np.zeros(3), 16000, 0, "spk")
    with pytest.raises(SchemaError):
        LabeledDataset([b, b], num_classes=2)


def test_digest_tracks_content():
    a = AudioSample("a", np.zeros(3), 16000, 0, "spk")
    assert a.digest() == AudioSample("a", np.zeros(3), 16000, 0, "spk").digest()
    assert a.digest() != AudioSample("a", np.ones(3) * 0.1, 16000, 0, "spk").digest()


@pytest.mark.parametrize("subtype,tol", [("float32", 1e-7), ("pcm16", 1 / 32767)])
def test_wav_round_trip(tmp_path, subtype, tol):
    x = np.random.default_rng(0).uniform(-0.9, 0.9, 1000)
    write_wav(tmp_path / "x.wav", x, 22050, subtype)
    y, sr = read_wav(tmp_path / "x.wav")
    assert sr == 22050
    assert np.max(np.abs(x - y)) <= tol


def test_read_wav_errors(tmp_path):
    with pytest.raises(DatasetLoadError):
        read_wav(tmp_path / "missing.wav")
    (tmp_path / "junk.wav").write_bytes(b"not a wav")
    with pytest.raises(DecodeError):
        read_wav(tmp_path / "junk.wav")


def _corpus(tmp_path, rows, labels=None, sr=16000):
    for rid, path, _, _ in rows:
        if not path.startswith("missing"):
            write_wav(tmp_path / path, np.full(800, 0.1), sr)
    m = write_manifest(tmp_path / "m.csv", rows)
    write_vocab(tmp_path / "m.vocab.json", labels or {"yes": 0, "no": 1})
    return m


def test_load_dataset(tmp_path):
    m = _corpus(tmp_path, [("a", "a.wav", "yes", "s1"), ("b", "b.wav", "no", "s2")])
    ds = load_dataset(m)
    assert ds.ids == ["a", "b"]
    assert list(ds.labels) == [0, 1]
    assert ds.label_names == ["yes", "no"]


def test_load_dataset_resamples(tmp_path):
    m = _corpus(tmp_path, [("a", "a.wav", "yes", "s1")], sr=8000)
    ds = load_dataset(m)
    assert ds.samples[0].sample_rate == 16000
    assert ds.samples[0].waveform.size == 1600


def test_unknown_label_rejected(tmp_path):
    m = _corpus(tmp_path, [("a", "a.wav", "maybe", "s1")])
    with pytest.raises(SchemaError, match="maybe"):
        load_dataset(m)


def test_missing_audio_names_row(tmp_path):
    m = _corpus(tmp_path, [("a", "a.wav", "yes", "s1"), ("b", "missing.wav", "no", "s2")])
    with pytest.raises(DatasetLoadError) as err:
        load_dataset(m)
    assert err.value.row == 3
    assert "id b" in str(err.value)


def test_vocab_rejects_out_of_range(tmp_path):
    (tmp_path / "m.vocab.json").write_text(json.dumps({"labels": {"a": 5}, "num_classes": 2}))
    write_manifest(tmp_path / "m.csv", [])
    with pytest.raises(SchemaError):
        load_dataset(tmp_path / "m.csv")


def test_floor_count():
    assert floor_count(0.29, 100) == 29
    assert floor_count(0.01, 720) == 7
    assert floor_count(0.9, 800) == 720


def test_split(tiny_corpus):
    train, test = split_dataset(tiny_corpus, 0.75, seed=3)
    assert len(train) == 72 and len(test) == 24
    assert not set(train.ids) & set(test.ids)
    assert set(train.ids) | set(test.ids) == set(tiny_corpus.ids)
    assert train.role == "clean_train" and test.role == "clean_test"
    again, _ = split_dataset(tiny_corpus, 0.75, seed=3)
    assert again.ids == train.ids
    other, _ = split_dataset(tiny_corpus, 0.75, seed=4)
    assert other.ids != train.ids


def test_split_errors(tiny_corpus):
    with pytest.raises(ParameterError):
        split_dataset(tiny_corpus, 1.0, 0)
    with pytest.raises(ParameterError):
        split_dataset(LabeledDataset([], 2), 0.5, 0)
