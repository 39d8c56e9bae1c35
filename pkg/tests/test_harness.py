import json

import numpy as np
import pytest

from pkdistill.data import PatchSet, SynthSpec, SynthStyle, synth_generate
from pkdistill.harness import (
    CONDITIONS, ExperimentConfig, MetricsReport, PipelineError, accuracy, mean_std, run_main_experiment,
    sweep_days, sweep_threshold, weighted_average,
)
from pkdistill.labels import EMPTY, OCCUPIED
from pkdistill.nn import ArchDescriptor, Dense, Flatten, MaxPool2x2
from pkdistill.store import ArtifactStore
from pkdistill.teacher import select_pseudo_labels

TINY = ArchDescriptor((32, 32, 3), (MaxPool2x2(), MaxPool2x2(), Flatten(), Dense(2)))


def _patches(labels):
    n = len(labels)
    return PatchSet(np.zeros((n, 1, 2, 2), np.float32), np.asarray(labels, np.int64), np.zeros(n, np.int64),
                    np.array(["c"] * n), np.array([f"{i}" for i in range(n)]), np.array(["s"] * n))


# ---------------------------------------------------------------- metrics

def test_accuracy_examples():
    balanced = _patches([OCCUPIED, EMPTY] * 4)
    majority = np.tile([0.9, 0.1], (8, 1))
    acc, conf = accuracy(majority, balanced)
    assert acc == 0.5 and conf.total == 8
    perfect = np.eye(2)[balanced.y]
    acc, conf = accuracy(perfect, balanced)
    assert acc == 1.0 and conf.correct == 8
    assert conf.counts[0][1] == conf.counts[1][0] == 0
    five = _patches([0, 0, 1, 1, 1])
    post = np.array([[0.8, 0.2], [0.3, 0.7], [0.1, 0.9], [0.6, 0.4], [0.5, 0.5]])
    assert accuracy(post, five)[0] == pytest.approx(0.6)


def test_accuracy_errors():
    with pytest.raises(ValueError, match="empty"):
        accuracy(np.zeros((0, 2)), _patches([]))
    with pytest.raises(ValueError, match="ground truth"):
        accuracy(np.ones((2, 2)) / 2, _patches([0, -1]))


def test_weighted_average_examples():
    assert round(weighted_average([(0.952, 1_000_000), (0.964, 120_000)]), 4) == 0.9533
    assert weighted_average([(0.8, 10), (0.6, 10)]) == pytest.approx(0.7)
    assert weighted_average([(0.91, 3)]) == 0.91
    with pytest.raises(ValueError):
        weighted_average([])
    with pytest.raises(ValueError):
        weighted_average([(0.9, 0)])


def test_population_stdev():
    assert mean_std([0.9, 0.9]) == (0.9, 0.0)
    m, s = mean_std([0.8, 1.0])
    assert m == pytest.approx(0.9) and s == pytest.approx(0.1)


def test_config_validation():
    for bad in ({"n_days": 1}, {"tau": 1.0}, {"tau": 0.4}, {"seeds": ()}, {"freeze": "x"}):
        with pytest.raises(ValueError):
            ExperimentConfig("a", "b", **bad)
    assert ExperimentConfig("a", "b").exclude == 7
    assert ExperimentConfig("a", "b", exclude_days_for_test=14).exclude == 14


def test_selection_never_reads_truth():
    post = np.random.default_rng(0).dirichlet([1, 1], size=30)
    a = select_pseudo_labels(_patches(np.zeros(30, int)), post, 0.7)
    b = select_pseudo_labels(_patches(np.ones(30, int)), post, 0.7)
    assert a.labels == b.labels and np.array_equal(a.patches.y, b.patches.y)


# ---------------------------------------------------------------- small pipeline

@pytest.fixture(scope="module")
def lots(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    a = synth_generate(SynthSpec("A", 10, 2, 1, 4, SynthStyle(overhang=0.2), seed=0), root / "A")
    b = synth_generate(SynthSpec("B", 10, 2, 1, 4, SynthStyle(base_hue=0.6, contrast=0.6), seed=1), root / "B")
    return a, b


def _cfg(lots, **kw):
    a, b = lots
    base = dict(n_days=4, seeds=(0,), teacher_arch=TINY, student_arch=TINY, epochs=2, tau=0.6)
    base.update(kw)
    return ExperimentConfig(a, b, **base)


def test_duplicate_seeds_give_zero_stdev(lots):
    rep = run_main_experiment(_cfg(lots, seeds=(3, 3), oracle=True), ArtifactStore())
    assert len(rep.rows) == len(CONDITIONS) * 3
    for r in rep.rows:
        assert r["per_seed"][0] == r["per_seed"][1] and r["acc_std"] == 0
    assert [p["correct"] for p in rep.per_seed[:1]] == [p["correct"] for p in rep.per_seed[1:2]]


def test_report_rows_and_weighted_identity(lots):
    rep = run_main_experiment(_cfg(lots, seeds=(0, 1)), ArtifactStore())
    dirs = ["A→B", "B→A"]
    assert {r["direction"] for r in rep.rows} == set(dirs) | {"weighted"}
    assert len(rep.rows) == 3 * 3
    for c in ("teacher", "student_raw", "student_ft"):
        per = [rep.row(c, d) for d in dirs]
        w = rep.row(c, "weighted")
        assert w["acc_mean"] == pytest.approx(sum(r["acc_mean"] * r["n_test"] for r in per) / sum(r["n_test"] for r in per),
                                              abs=1e-15)
        # test hygiene: only days >= n_days are scored (10 - 4 days x 2 angles x 4 spots)
        assert all(r["n_test"] == 6 * 2 * 4 for r in per)
    ft = rep.row("student_ft", "A→B")
    assert ft["tau"] == 0.6 and ft["used"] <= 4 * 2 * 4
    assert json.loads(rep.to_json())["rows"][0]["condition"] == "teacher"
    assert "population" in rep.to_text()


def test_report_save_is_deterministic(lots, tmp_path):
    cfg = _cfg(lots)
    a = run_main_experiment(cfg, ArtifactStore(tmp_path / "s1"), both_directions=False)
    b = run_main_experiment(cfg, ArtifactStore(tmp_path / "s2"), both_directions=False)
    ja, ta = a.save(tmp_path / "a")
    jb, tb = b.save(tmp_path / "b")
    assert ja.read_bytes() == jb.read_bytes() and ta.read_bytes() == tb.read_bytes()
    assert isinstance(MetricsReport(**json.loads(ja.read_text())), MetricsReport)


def test_threshold_sweep_monotone_counts(lots):
    # an under-trained teacher is rarely confident, so the grid stays low
    taus = (0.5, 0.55, 0.6, 0.62)
    rep = sweep_threshold(_cfg(lots), taus=taus, store=ArtifactStore(), both_directions=False)
    ft = [r for r in rep.rows if r["condition"] == "student_ft"]
    assert tuple(r["tau"] for r in ft) == taus
    used, wrong = [r["used"] for r in ft], [r["wrong"] for r in ft]
    assert used == sorted(used, reverse=True) and wrong == sorted(wrong, reverse=True)
    oracle = [r for r in rep.rows if r["condition"] == "oracle"]
    assert len(oracle) == 1 and oracle[0]["wrong"] == 0 and oracle[0]["used"] == 4 * 2 * 4


def test_day_sweep_requires_fifteen_days(lots):
    with pytest.raises(ValueError, match=">= 15 days"):
        sweep_days(_cfg(lots), range(6, 9), ArtifactStore(), both_directions=False)


def test_day_sweep_rows_share_a_fixed_test_set(tmp_path):
    a = synth_generate(SynthSpec("A", 16, 2, 1, 3, SynthStyle(overhang=0.2), seed=0), tmp_path / "A")
    b = synth_generate(SynthSpec("B", 16, 2, 1, 3, SynthStyle(base_hue=0.6, contrast=0.6), seed=1), tmp_path / "B")
    cfg = ExperimentConfig(a, b, seeds=(0,), teacher_arch=TINY, student_arch=TINY, epochs=2, tau=0.5)
    rep = sweep_days(cfg, (6, 9), ArtifactStore())
    assert rep.config["exclude_days_for_test"] == 14
    for d in ("A→B", "B→A", "weighted"):
        rows = [r for r in rep.rows if r["direction"] == d]
        assert [r["n"] for r in rows] == [6, 9]
        assert {r["condition"] for r in rows} == {"student_ft"}
        assert len({r["n_test"] for r in rows}) == 1
    assert rows[0]["n_test"] == 2 * 2 * 2 * 3


def test_stage_failure_names_stage_and_seed(lots):
    with pytest.raises(PipelineError) as info:
        run_main_experiment(_cfg(lots, n_days=9, seeds=(2,), exclude_days_for_test=10), ArtifactStore(),
                            both_directions=False)
    assert info.value.seed == 2 and info.value.stage == "evaluate"
    assert "seed 2" in str(info.value)


def test_identical_source_and_target_rejected(lots):
    a, _ = lots
    with pytest.raises(ValueError, match="identical"):
        run_main_experiment(ExperimentConfig(a, a, teacher_arch=TINY, student_arch=TINY, seeds=(0,)))
