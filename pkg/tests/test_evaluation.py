import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TableModel, make_dataset
from vcbackdoor.errors import DegenerateSetError, ParameterError
from vcbackdoor.evaluation import (
    AttackSetup,
    EvalReport,
    SampleRecord,
    SweepResult,
    attack_success_rate,
    benign_accuracy,
    evaluate,
    format_matrix,
    metrics_from_records,
    modification_ratio_db,
    quality_report,
    run_poisoning_rate_sweep,
    run_target_label_sweep,
    scenario_matrix,
)
from vcbackdoor.train import ModelSpec, TrainConfig
from vcbackdoor.triggers import TriggerSpec, apply_trigger

TRIG = TriggerSpec("badnets_spectrogram", pattern_amplitude=0.3)


def test_oracle_model_has_perfect_ba():
    ds = make_dataset([0, 1, 2, 3] * 3, 4, role="clean_test")
    oracle = TableModel({s.id: s.label for s in ds.samples})
    assert benign_accuracy(oracle, ds) == 1.0


def test_constant_model_on_balanced_set():
    ds = make_dataset([0, 1, 2, 3] * 5, 4, role="clean_test")
    assert benign_accuracy(lambda samples: [2] * len(samples), ds) == 0.25


def test_always_target_gives_full_asr():
    ds = make_dataset([0, 1, 2, 3] * 3, 4, role="clean_test")
    assert attack_success_rate(lambda samples: [1] * len(samples), ds, TRIG, 1) == 1.0


def test_asr_counting_example():
    ds = make_dataset([1, 2, 3, 1], 4, role="clean_test")
    model = TableModel({}, dict(zip(ds.ids, [0, 0, 3, 0])))
    assert attack_success_rate(model, ds, TRIG, 0) == 0.75


def test_asr_excludes_target_class():
    # Including the two y_t samples (both predicted y_t) would give 4/6; excluding gives 2/4.
    ds = make_dataset([0, 0, 1, 1, 2, 2], 3, role="clean_test")
    model = TableModel({}, dict(zip(ds.ids, [0, 0, 0, 1, 0, 2])))
    assert attack_success_rate(model, ds, TRIG, 0) == 0.5
    rep = evaluate(TableModel({s.id: 0 for s in ds.samples}, model.trig_pred), ds, TRIG, 0)
    assert rep.attack_success_rate == 0.5 and rep.n_eval_attack == 4


def test_degenerate_and_empty_sets():
    ds = make_dataset([1, 1], 2, role="clean_test")
    with pytest.raises(DegenerateSetError):
        attack_success_rate(lambda s: [1] * len(s), ds, TRIG, 1)
    empty = make_dataset([], 2, role="clean_test")
    with pytest.raises(ParameterError):
        benign_accuracy(lambda s: [], empty)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=25),
       st.integers(0, 3))
def test_metrics_match_brute_force(rows, y_t):
    labels = [r[0] for r in rows]
    ds = make_dataset(labels, 4, role="clean_test")
    model = TableModel(dict(zip(ds.ids, [r[1] for r in rows])), dict(zip(ds.ids, [r[2] for r in rows])))
    ba = Fraction(sum(r[0] == r[1] for r in rows), len(rows))
    assert benign_accuracy(model, ds) == float(ba)
    attack = [r for r in rows if r[0] != y_t]
    if not attack:
        with pytest.raises(DegenerateSetError):
            evaluate(model, ds, TRIG, y_t)
        return
    asr = Fraction(sum(r[2] == y_t for r in attack), len(attack))
    rep = evaluate(model, ds, TRIG, y_t)
    assert rep.benign_accuracy == float(ba) and rep.attack_success_rate == float(asr)
    assert rep.recompute() == (ba, asr)
    assert rep.n_eval_benign + rep.n_eval_attack == len(rep.per_sample)


def test_report_round_trip():
    ds = make_dataset([0, 1, 2], 3, role="clean_test")
    rep = evaluate(TableModel({i: 0 for i in ds.ids}, {i: 1 for i in ds.ids}), ds, TRIG, 1)
    again = EvalReport.from_dict(json.loads(json.dumps(rep.to_dict())))
    assert again == rep


def test_metrics_from_records_empty():
    assert metrics_from_records([SampleRecord("a", 0, 0, False)], 0) == (1, None)


def test_evaluation_does_not_mutate(tiny_split):
    _, test = tiny_split
    before = test.digest()
    evaluate(lambda s: [0] * len(s), test, TRIG, 1)
    assert test.digest() == before


def test_scenario_matrix_rows():
    ds = make_dataset([0, 1, 2, 3] * 2, 4, role="clean_test")
    model = TableModel({i: 1 for i in ds.ids}, {i: 0 for i in ds.ids})
    probes = {"train": TRIG, "clean": TriggerSpec("none")}
    m = scenario_matrix(model, probes, ds, 0)
    assert m == {"train": 1.0, "clean": 0.0}
    assert m["train"] == attack_success_rate(model, ds, TRIG, 0)
    with pytest.raises(ParameterError):
        scenario_matrix(model, [], ds, 0)
    assert "train" in format_matrix({k: {"m": v} for k, v in m.items()})


def test_quality_proxy():
    ds = make_dataset([0, 1] * 5, 2, length=2000)
    same = quality_report(ds.samples, [apply_trigger(s, TriggerSpec("none")) for s in ds.samples])
    bad = quality_report(ds.samples, [apply_trigger(s, TRIG) for s in ds.samples])
    assert "not NISQA" in same.scorer
    assert all(p["poisoned"] == 100.0 for p in same.pairs)
    assert [p["id"] for p in bad.pairs] == ds.ids
    assert all(b["poisoned"] < s["poisoned"] for b, s in zip(bad.pairs, same.pairs))
    assert modification_ratio_db(np.ones(4), np.ones(4)) == 100.0


def test_external_scorer_partial_failure(tmp_path):
    import sys

    from vcbackdoor.evaluation import ScorerConfig

    script = tmp_path / "score.py"
    script.write_text("import sys\nfrom scipy.io import wavfile\nsr, x = wavfile.read(sys.argv[1])\n"
                      "sys.exit(1) if abs(x).max() > 0.25 else print(3.5)\n")
    ds = make_dataset([0, 1, 0], 2, length=2000)
    quiet = [s.with_waveform(s.waveform * 0.5) for s in ds.samples]
    quiet[1] = quiet[1].with_waveform(np.full(2000, 0.9))
    rep = quality_report(quiet, quiet, ScorerConfig(f"{sys.executable} {script} {{audio}}"))
    assert len(rep.pairs) == 2 and len(rep.failures) == 1
    assert rep.mean_delta == 0.0


@pytest.fixture(scope="module")
def setup(tiny_split):
    train, test = tiny_split
    trig = TriggerSpec("surrogate_identity_shift", shift_params={"ratio": 1.2, "band_weights": [0.5, 0.5, 3, 3]})
    return AttackSetup(train, test, trig, 0, 0.05, ModelSpec(num_classes=4, channels=(4, 8), hidden=16),
                       TrainConfig(epochs=1))


def test_rate_sweep_schema_and_resume(setup, tmp_path):
    res = run_poisoning_rate_sweep([0.0, 0.1], setup, seeds=[0, 1], store=tmp_path)
    assert len(res.points) == 4 and res.trainings == 4
    assert [p.value for p in res.points] == [0.0, 0.0, 0.1, 0.1]
    again = run_poisoning_rate_sweep([0.0, 0.1], setup, seeds=[0, 1], store=tmp_path)
    assert again.trainings == 0
    assert [p.report for p in again.points] == [p.report for p in res.points]
    assert SweepResult.from_dict(json.loads(json.dumps(res.to_dict()))).points == res.points
    assert "poisoning_rate" in res.table()
    with pytest.raises(ParameterError):
        run_poisoning_rate_sweep([0.1, 0.0], setup, seeds=[0])


def test_label_sweep(setup):
    res = run_target_label_sweep([2, 1], setup, seeds=[0])
    assert [p.value for p in res.points] == [1, 2]
    assert all(p.report.target_label == p.value for p in res.points)
