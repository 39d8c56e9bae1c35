import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pkdistill.data import PatchSet, SynthSpec, SynthStyle, synth_generate, take_days
from pkdistill.labels import EMPTY, OCCUPIED
from pkdistill.nn import ArchDescriptor, Checkpoint, Dense, Flatten, MaxPool2x2, STUDENT, TEACHER_MEMBER
from pkdistill.store import ArtifactStore, MissingArtifact
from pkdistill.teacher import (
    Ensemble, PseudoLabelSet, build_ensemble, ensemble_predict, member_seed, pseudo_label,
    select_pseudo_labels, true_label_set,
)

TINY = ArchDescriptor((32, 32, 3), (MaxPool2x2(), MaxPool2x2(), Flatten(), Dense(2)))


def _const_member(p_occupied: float) -> Checkpoint:
    """A network that ignores its input and outputs fixed posteriors."""
    arch = ArchDescriptor((2, 2, 1), (Flatten(), Dense(2)))
    w = np.zeros((2, 4), np.float64)
    b = np.log(np.array([p_occupied, 1 - p_occupied]))
    return Checkpoint(arch, [w, b])


def _patchset(n, labels=None, days=None):
    labels = np.asarray(labels if labels is not None else np.zeros(n), dtype=np.int64)
    days = np.asarray(days if days is not None else np.arange(n) % 7, dtype=np.int64)
    return PatchSet(np.zeros((n, 1, 2, 2), np.float32), labels, days, np.array(["c1"] * n),
                    np.array([f"img{i}.png" for i in range(n)]), np.array(["s1"] * n))


@pytest.fixture(scope="module")
def lots(tmp_path_factory):
    root = tmp_path_factory.mktemp("lots")
    style = SynthStyle(overhang=0.2)
    return {k: synth_generate(SynthSpec(f"L{k}", 4, k, 1, 2, style, seed=k), root / str(k)) for k in (1, 2, 3)}


# ---------------------------------------------------------------- construction

def test_member_counts_follow_angles(lots):
    store = ArtifactStore()
    e3 = build_ensemble(lots[3], TINY, seed=0, epochs=1, store=store)
    e2 = build_ensemble(lots[2], TINY, seed=0, epochs=1, store=store)
    e1 = build_ensemble(lots[1], TINY, seed=0, epochs=1, store=store)
    assert (len(e3), len(e2), len(e1)) == (4, 3, 1)
    assert e3.warnings == [] and e2.warnings == []
    assert len(e1.warnings) == 1 and "single camera angle" in e1.warnings[0]
    assert [m.meta["member"] for m in e3.members] == ["t0", "t1", "t2", "t3"]
    assert [m.meta.get("held_out") for m in e3.members[1:]] == lots[3].angles
    assert [m.meta["seed"] for m in e3.members] == [member_seed(0, i) for i in range(4)] == [0, 1, 2, 3]
    # t0 validates on the chronological complement: 4 days -> 3 train, 1 validate
    assert e3.members[0].meta["n_train"] == 3 * 3 * 2 and e3.members[0].meta["n_val"] == 3 * 2
    # held-out members validate on one angle's spots
    assert all(m.meta["n_val"] == 4 * 2 for m in e3.members[1:])


def test_ensemble_is_cached_and_reproducible(lots, tmp_path):
    store = ArtifactStore(tmp_path)
    a = build_ensemble(lots[2], TINY, seed=5, epochs=1, store=store)
    b = build_ensemble(lots[2], TINY, seed=5, epochs=1, store=ArtifactStore(tmp_path, readonly=True))
    c = build_ensemble(lots[2], TINY, seed=5, epochs=1, store=ArtifactStore())
    assert [m.to_bytes() for m in a.members] == [m.to_bytes() for m in b.members] == [m.to_bytes() for m in c.members]
    with pytest.raises(MissingArtifact, match="ensemble"):
        build_ensemble(lots[2], TINY, seed=6, epochs=1, store=ArtifactStore(tmp_path, readonly=True))


def test_ensemble_validation():
    with pytest.raises(ValueError):
        Ensemble([])
    student = Checkpoint(STUDENT, [np.zeros(s, np.float32) for s in STUDENT.param_shapes()])
    odd = ArchDescriptor((16, 16, 3), (Flatten(), Dense(2)))
    with pytest.raises(ValueError, match="input"):
        Ensemble([student, Checkpoint(odd, [np.zeros(s) for s in odd.param_shapes()])])
    three = ArchDescriptor((32, 32, 3), (Flatten(), Dense(3)))
    with pytest.raises(ValueError, match="two logits"):
        Ensemble([Checkpoint(three, [np.zeros(s) for s in three.param_shapes()])])
    assert TEACHER_MEMBER.input == STUDENT.input


# ---------------------------------------------------------------- averaging

def test_average_of_constant_members():
    x = np.zeros((3, 1, 2, 2), np.float32)
    post = ensemble_predict(Ensemble([_const_member(0.9), _const_member(0.7)]), x)
    assert np.allclose(post, [[0.8, 0.2]] * 3, atol=1e-7)
    post = ensemble_predict(Ensemble([_const_member(p) for p in (0.6, 0.2, 0.9, 0.5)]), x)
    assert np.allclose(post[:, OCCUPIED], 0.55, atol=1e-7)
    single = ensemble_predict(Ensemble([_const_member(0.3)]), x)
    assert np.allclose(single[:, OCCUPIED], 0.3, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=5), st.randoms(use_true_random=False))
def test_average_is_permutation_invariant(ps, rnd):
    x = np.zeros((2, 1, 2, 2), np.float32)
    members = [_const_member(p) for p in ps]
    shuffled = members[:]
    rnd.shuffle(shuffled)
    a = ensemble_predict(Ensemble(members), x)
    b = ensemble_predict(Ensemble(shuffled), x)
    assert np.allclose(a, b, atol=1e-7)
    assert np.allclose(a[:, OCCUPIED], sum(ps) / len(ps), atol=1e-6)
    assert np.allclose(a.sum(axis=1), 1, atol=1e-6)


def test_member_equal_to_mean_leaves_average_unchanged():
    x = np.zeros((2, 1, 2, 2), np.float32)
    ps = [0.2, 0.5, 0.95]
    base = ensemble_predict(Ensemble([_const_member(p) for p in ps]), x)
    grown = ensemble_predict(Ensemble([_const_member(p) for p in ps + [sum(ps) / 3]]), x)
    assert np.allclose(base, grown, atol=1e-7)


# ---------------------------------------------------------------- threshold

def _posteriors(p_occ):
    p = np.asarray(p_occ, dtype=np.float64)
    return np.stack([p, 1 - p], axis=1)


def test_threshold_is_strict_and_counts_wrong():
    cands = _patchset(5, labels=[OCCUPIED, OCCUPIED, EMPTY, EMPTY, OCCUPIED])
    post = _posteriors([0.95, 0.9, 0.02, 0.5, 0.03])
    sel = select_pseudo_labels(cands, post, 0.9)
    assert [p.image for p in sel.labels] == ["img0.png", "img2.png", "img4.png"]
    assert [p.label for p in sel.labels] == [OCCUPIED, EMPTY, EMPTY]
    assert sel.wrong == 1 and sel.used == 3 and sel.candidates == 5
    assert list(sel.patches.y) == [OCCUPIED, EMPTY, EMPTY]
    assert math.isclose(sel.labels[1].posterior, 0.98)


def test_threshold_bounds_and_empty():
    cands = _patchset(2)
    for tau in (0.49, 1.0):
        with pytest.raises(ValueError):
            select_pseudo_labels(cands, _posteriors([0.6, 0.6]), tau)
    with pytest.raises(ValueError):
        select_pseudo_labels(cands, _posteriors([0.6]), 0.9)
    empty = select_pseudo_labels(_patchset(0), np.zeros((0, 2)), 0.9)
    assert (empty.candidates, empty.used, empty.wrong) == (0, 0, 0)
    unlabeled = select_pseudo_labels(_patchset(2, labels=[-1, -1]), _posteriors([0.99, 0.01]), 0.9)
    assert unlabeled.wrong is None and unlabeled.used == 2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40),
       st.lists(st.floats(0.5, 0.999), min_size=2, max_size=6))
def test_threshold_monotone_and_brute_force(ps, taus):
    cands = _patchset(len(ps), labels=np.arange(len(ps)) % 2)
    post = _posteriors(ps)
    taus = sorted(taus)
    used = []
    for tau in taus:
        sel = select_pseudo_labels(cands, post, tau)
        brute = [i for i, p in enumerate(ps) if max(p, 1 - p) > tau]
        assert [int(p.image[3:-4]) for p in sel.labels] == brute
        assert 0 <= sel.wrong <= sel.used
        used.append(sel.used)
    assert all(a >= b for a, b in zip(used, used[1:]))


def test_true_label_set_is_oracle():
    cands = _patchset(4, labels=[0, 1, 1, 0])
    oracle = true_label_set(cands)
    assert oracle.used == 4 and oracle.wrong == 0 and [p.label for p in oracle.labels] == [0, 1, 1, 0]
    with pytest.raises(ValueError):
        true_label_set(_patchset(2, labels=[0, -1]))


# ---------------------------------------------------------------- end to end and IO

def test_pseudo_label_target_days(lots):
    ens = build_ensemble(lots[2], TINY, seed=0, epochs=1, store=ArtifactStore())
    target = take_days(lots[3], "first_n", 2)
    low = pseudo_label(ens, target, tau=0.5)
    high = pseudo_label(ens, target, tau=0.99)
    assert low.candidates == high.candidates == 2 * 3 * 2
    assert high.used <= low.used
    assert all(p.day < 2 for p in low.labels)


def test_jsonl_round_trip(tmp_path):
    cands = _patchset(4, labels=[0, 1, 0, 0], days=[0, 1, 2, 3])
    sel = select_pseudo_labels(cands, _posteriors([0.99, 0.2, 0.01, 0.97]), 0.9)
    path = tmp_path / "pl.jsonl"
    sel.save(path)
    stats = json.loads((tmp_path / "pl.stats.json").read_text())
    assert stats == {"candidates": 4, "used": 3, "wrong": 1, "tau": 0.9}
    back = PseudoLabelSet.load(path)
    assert back.labels == sel.labels and back.stats() == sel.stats()
    first = json.loads(path.read_text().splitlines()[0])
    assert first == {"image": "img0.png", "spot": "s1", "label": "occupied", "posterior": 0.99, "day": 0,
                     "angle": "c1"}
    attached = back.attach(cands)
    assert list(attached.patches.y) == [OCCUPIED, EMPTY, OCCUPIED]
    assert list(attached.patches.day) == [0, 2, 3]
    with pytest.raises(ValueError):
        PseudoLabelSet.from_jsonl(path.read_text(), dict(stats, used=2))
    with pytest.raises(KeyError):
        back.attach(_patchset(1))
