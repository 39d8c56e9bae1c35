import math

import numpy as np
import pytest

from pkdistill.data import PatchSet
from pkdistill.nn import STUDENT, AdamHyper, ArchDescriptor, Checkpoint, Conv2D, Dense, Flatten, MaxPool2x2, ReLU
from pkdistill.nn.network import init_params
from pkdistill.store import ArtifactStore
from pkdistill.student import (
    FreezePolicy, FinetuneSplit, finetune, make_finetune_split, split_days,
)
from pkdistill.teacher import PseudoLabel, PseudoLabelSet

SMALL = ArchDescriptor((8, 8, 3), (Conv2D(4, 3, 1, 1), ReLU(), MaxPool2x2(), Conv2D(4, 3, 1, 1), ReLU(),
                                   MaxPool2x2(), Flatten(), Dense(2)))


def _pseudo(days, angles=None, seed=0) -> PseudoLabelSet:
    """Pseudo-labels with attached patches whose first channel encodes the label."""
    rng = np.random.default_rng(seed)
    n = len(days)
    angles = angles if angles is not None else ["c1"] * n
    y = rng.integers(0, 2, n)
    x = rng.random((n, 3, 8, 8)).astype(np.float32) * 0.3
    x[y == 1, 0] += 0.7
    patches = PatchSet(x, y.astype(np.int64), np.asarray(days, np.int64), np.array(angles),
                       np.array([f"i{i}.png" for i in range(n)]), np.array(["s1"] * n))
    labels = [PseudoLabel(f"i{i}.png", "s1", int(y[i]), 0.95, int(days[i]), angles[i]) for i in range(n)]
    return PseudoLabelSet(labels, 0.9, n, 0, patches)


def _pretrained(seed=0) -> Checkpoint:
    return Checkpoint(SMALL, init_params(SMALL, np.random.default_rng(seed)))


# ---------------------------------------------------------------- day split

@pytest.mark.parametrize("n, train, val", [(7, range(0, 5), range(5, 7)), (8, range(0, 6), range(6, 8)),
                                           (14, range(0, 10), range(10, 14)), (2, range(0, 1), range(1, 2))])
def test_split_days_examples(n, train, val):
    assert split_days(n) == (train, val)


def test_split_days_exhaustive():
    for n in range(2, 101):
        train, val = split_days(n)
        assert len(val) == math.ceil(n / 4) >= 1 and len(train) >= 1
        assert list(train) + list(val) == list(range(n))


@pytest.mark.parametrize("n", [0, 1])
def test_split_days_too_small(n):
    with pytest.raises(ValueError, match="consume all training days"):
        split_days(n)


def test_make_split_partitions_labels():
    pl = _pseudo([0, 1, 2, 3, 4, 5, 6, 6, 5, 0])
    split = make_finetune_split(pl, 7)
    assert (split.n, split.l) == (7, 2)
    assert set(split.train.day.tolist()) <= set(range(5)) and set(split.val.day.tolist()) <= {5, 6}
    assert len(split.train) + len(split.val) == pl.used
    assert set(split.train.image) | set(split.val.image) == {p.image for p in pl.labels}


def test_make_split_errors_carry_histogram():
    with pytest.raises(ValueError, match="validation side"):
        make_finetune_split(_pseudo([0, 1, 1, 2]), 7)
    with pytest.raises(ValueError, match="train side"):
        make_finetune_split(_pseudo([6, 6]), 7)
    with pytest.raises(ValueError, match="outside"):
        make_finetune_split(_pseudo([0, 9]), 7)
    with pytest.raises(ValueError, match="no attached patches"):
        make_finetune_split(PseudoLabelSet([], 0.9, 0, 0), 7)


# ---------------------------------------------------------------- freezing

def test_freeze_masks():
    assert FreezePolicy().trainable(STUDENT) is None
    assert FreezePolicy("last_conv_and_dense").trainable(STUDENT) == [False] * 4 + [True] * 4
    assert FreezePolicy("last_conv_and_dense").trainable(SMALL) == [False, False, True, True, True, True]
    with pytest.raises(ValueError):
        FreezePolicy("nothing")
    with pytest.raises(ValueError):
        FreezePolicy("last_conv_and_dense").trainable(ArchDescriptor((4, 4, 3), (Flatten(), Dense(2))))


def test_frozen_tensors_stay_bit_identical():
    pre = _pretrained()
    split = make_finetune_split(_pseudo(list(range(7)) * 6), 7)
    out = finetune(pre, split, AdamHyper(batch_size=8), FreezePolicy("last_conv_and_dense"), seed=1, epochs=3,
                   store=ArtifactStore())
    assert out.params[0].tobytes() == pre.params[0].tobytes()
    assert out.params[1].tobytes() == pre.params[1].tobytes()
    assert out.params[2].tobytes() != pre.params[2].tobytes()
    full = finetune(pre, split, AdamHyper(batch_size=8), FreezePolicy(), seed=1, epochs=3, store=ArtifactStore())
    assert full.params[0].tobytes() != pre.params[0].tobytes()
    assert out.meta["freeze"] == "last_conv_and_dense" and full.meta["freeze"] == "all_layers"


# ---------------------------------------------------------------- fine-tuning

def test_finetune_best_epoch_and_meta():
    pre = _pretrained()
    split = make_finetune_split(_pseudo(list(range(8)) * 6, seed=2), 8)
    out = finetune(pre, split, AdamHyper(learning_rate=0.01, batch_size=8), seed=3, epochs=6, store=ArtifactStore())
    m = out.meta
    assert (m["n"], m["l"], m["n_train"] + m["n_val"]) == (8, 2, 48)
    hist, losses = m["val_history"], m["val_loss_history"]
    assert len(hist) == 6 and m["val_acc"] == max(hist)
    best = [e for e in range(6) if hist[e] == max(hist)]
    assert m["epoch"] == 1 + min(best, key=lambda e: losses[e])
    # fine-tuning never alters the pretrained checkpoint
    assert all(np.array_equal(a, b) for a, b in zip(pre.params, _pretrained().params))


def test_finetune_is_deterministic_and_seed_sensitive(tmp_path):
    pre = _pretrained()
    split = make_finetune_split(_pseudo(list(range(7)) * 4), 7)
    a = finetune(pre, split, seed=1, epochs=2, store=ArtifactStore())
    b = finetune(pre, split, seed=1, epochs=2, store=ArtifactStore(tmp_path))
    c = finetune(pre, split, seed=2, epochs=2, store=ArtifactStore())
    assert a.to_bytes() == b.to_bytes()
    assert a.to_bytes() != c.to_bytes()
    assert b.to_bytes() == finetune(pre, split, seed=1, epochs=2, store=ArtifactStore(tmp_path, True)).to_bytes()


def test_per_angle_labels_are_isolated():
    days = list(range(7)) * 4
    angles = ["c1", "c2"] * 14
    pl = _pseudo(days, angles)
    for a in ("c1", "c2"):
        part = pl.for_angle(a)
        split = make_finetune_split(part, 7)
        assert set(split.train.angle) == set(split.val.angle) == {a}
        assert part.used == 14 and part.wrong is None
    assert isinstance(make_finetune_split(pl.for_angle("c1"), 7), FinetuneSplit)
