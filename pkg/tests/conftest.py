import numpy as np
import pytest

from vcbackdoor.corpus import synthesize_corpus
from vcbackdoor.data import AudioSample, LabeledDataset, split_dataset

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_corpus():
    """4 classes x 24 utterances; enough to train for a couple of epochs."""
    return synthesize_corpus(n_classes=4, samples_per_class=24, n_speakers=6, seed=11)


@pytest.fixture(scope="session")
def tiny_split(tiny_corpus):
    return split_dataset(tiny_corpus, 0.75, seed=0)


def make_dataset(labels, num_classes, length=600, seed=0, role="clean_train"):
    rng = np.random.default_rng(seed)
    samples = [AudioSample(f"s{i:04d}", 0.1 * rng.standard_normal(length), 16000, int(y), f"spk{i % 3}")
               for i, y in enumerate(labels)]
    return LabeledDataset(samples, num_classes, role)


class TableModel:
    """Returns fixed predictions per (id, triggered) from a lookup table."""

    def __init__(self, clean_pred: dict, trig_pred: dict | None = None):
        self.clean_pred = clean_pred
        self.trig_pred = trig_pred or {}

    def predict_batch(self, samples):
        return np.array([self.trig_pred[s.id] if s.provenance == "poisoned" else self.clean_pred[s.id]
                         for s in samples])
