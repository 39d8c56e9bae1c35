"""Lightweight student: source pretraining and per-angle fine-tuning on pseudo-labels."""
from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data.manifest import DatasetManifest
from .data.patches import PatchSet, extract_patches
from .data.splits import partition_chronological
from .nn.adam import AdamHyper
from .nn.arch import ArchDescriptor, Conv2D
from .nn.checkpoint import Checkpoint
from .nn.training import EPOCHS, fit
from .store import ArtifactStore, digest
from .teacher import PseudoLabelSet, train_member

FREEZE_MODES = ("all_layers", "last_conv_and_dense")


@dataclass(frozen=True)
class FreezePolicy:
    mode: str = "all_layers"

    def __post_init__(self):
        if self.mode not in FREEZE_MODES:
            raise ValueError(f"freeze mode must be one of {FREEZE_MODES}, got {self.mode!r}")

    def trainable(self, arch: ArchDescriptor) -> list[bool] | None:
        """Per-tensor update mask, or None when everything trains."""
        if self.mode == "all_layers":
            return None
        convs = [i for i, layer in enumerate(arch.layers) if isinstance(layer, Conv2D)]
        if not convs:
            raise ValueError("freeze mode last_conv_and_dense needs an arch with a conv layer")
        # tensors owned by the last conv and every layer after it (the dense head)
        return [i >= convs[-1] for i in arch.param_layers()]


@dataclass
class FinetuneSplit:
    n: int
    l: int
    train_days: range
    val_days: range
    train: PatchSet
    val: PatchSet


def split_days(n: int) -> tuple[range, range]:
    """Last ceil(n/4) of the first ``n`` days validate; the rest train."""
    if n < 2:
        raise ValueError(f"n={n}: validation split would consume all training days")
    l = math.ceil(n / 4)
    return range(0, n - l), range(n - l, n)


def make_finetune_split(pseudo: PseudoLabelSet, n: int) -> FinetuneSplit:
    train_days, val_days = split_days(n)
    if pseudo.patches is None:
        raise ValueError("pseudo-label set has no attached patches")
    days = pseudo.patches.day
    if len(days) and (days.min() < 0 or days.max() >= n):
        raise ValueError(f"pseudo-labels span days {days.min()}..{days.max()}, outside [0, {n})")
    is_val = days >= val_days.start
    train, val = pseudo.patches.take(~is_val), pseudo.patches.take(is_val)
    if len(train) == 0 or len(val) == 0:
        hist = dict(sorted(Counter(days.tolist()).items()))
        side = "train" if len(train) == 0 else "validation"
        raise ValueError(f"empty {side} side after fine-tune split (n={n}); pseudo-labels per day: {hist}")
    return FinetuneSplit(n, len(val_days), train_days, val_days, train, val)


def pretrain_student(source: DatasetManifest, arch: ArchDescriptor, hyper: AdamHyper = AdamHyper(),
                     seed: int = 0, epochs: int = EPOCHS, store: ArtifactStore | None = None) -> Checkpoint:
    """Train on the same chronological 70% split used for t0."""
    def build():
        split = partition_chronological(source, 0.7)
        return train_member(extract_patches(split.train), extract_patches(split.val), arch, hyper, seed,
                            epochs, {"stage": "pretrain", "source": source.name})

    key = digest("student", source.digest(), arch.canonical_text(), hyper.to_dict(), seed, epochs)
    return (store or ArtifactStore()).checkpoint("student", key, "student.pkds", build)


def _split_digest(split: FinetuneSplit) -> str:
    h = hashlib.sha256()
    for part in (split.train, split.val):
        h.update("|".join(f"{i}:{s}:{y}" for i, s, y in zip(part.image, part.spot, part.y)).encode())
        h.update(b"#")
    return h.hexdigest()[:16]


def finetune(pretrained: Checkpoint, split: FinetuneSplit, hyper: AdamHyper = AdamHyper(),
             freeze: FreezePolicy = FreezePolicy(), seed: int = 0, epochs: int = EPOCHS,
             meta: dict | None = None, store: ArtifactStore | None = None) -> Checkpoint:
    """Continue training on pseudo-labels with a fresh Adam state.

    Validation scores against the pseudo-labels of the last ``l`` days;
    ground truth is never consulted. Confident pseudo-labels are easy, so
    validation accuracy often saturates; ties then go to the lower
    validation cross-entropy.
    """
    arch = pretrained.arch
    trainable = freeze.trainable(arch)

    def build():
        rng = np.random.default_rng(seed)
        res = fit(arch, pretrained.params, split.train.x, split.train.y, split.val.x, split.val.y,
                  hyper, rng, epochs, trainable, tie_break="val_loss")
        info = dict(meta or {})
        info.update(stage="finetune", n=split.n, l=split.l, freeze=freeze.mode, seed=seed,
                    epoch=res.best_epoch, val_acc=res.best_val_acc, val_history=res.val_history,
                    val_loss_history=res.val_loss_history,
                    n_train=len(split.train), n_val=len(split.val))
        return Checkpoint(arch, res.params, res.adam_state, info)

    key = digest("finetune", hashlib.sha256(pretrained.to_bytes()).hexdigest(), _split_digest(split),
                 hyper.to_dict(), freeze.mode, seed, epochs, meta or {})
    return (store or ArtifactStore()).checkpoint("finetune", key, "student.pkds", build)
