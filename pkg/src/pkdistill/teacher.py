"""Teacher ensemble: construction, averaged-posterior inference, pseudo-labels."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.manifest import DatasetManifest
from .data.patches import PatchSet, extract_patches
from .data.splits import leave_one_angle_out, partition_chronological
from .labels import NAMES, CODES, predict
from .nn.adam import AdamHyper
from .nn.arch import ArchDescriptor
from .nn.checkpoint import Checkpoint
from .nn.network import Network, init_params
from .nn.training import EPOCHS, fit
from .store import ArtifactStore, atomic_write, digest

log = logging.getLogger(__name__)


def train_member(train: PatchSet, val: PatchSet, arch: ArchDescriptor, hyper: AdamHyper,
                 seed: int, epochs: int = EPOCHS, meta: dict | None = None) -> Checkpoint:
    """Fresh He-initialised network, ``epochs`` epochs of Adam, best validation epoch kept."""
    if len(train) == 0:
        raise ValueError("train_member: empty training set")
    if len(val) == 0:
        raise ValueError("train_member: empty validation set")
    rng = np.random.default_rng(seed)
    params = init_params(arch, rng)
    res = fit(arch, params, train.x, train.y, val.x, val.y, hyper, rng, epochs)
    info = dict(meta or {})
    info.update(seed=seed, epoch=res.best_epoch, val_acc=res.best_val_acc,
                val_history=res.val_history, n_train=len(train), n_val=len(val))
    return Checkpoint(arch, res.params, res.adam_state, info)


@dataclass
class Ensemble:
    """Members ordered [t0, t1..tk]; the prediction is the mean of member posteriors."""

    members: list[Checkpoint]
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        inp = self.members[0].arch.input
        for i, m in enumerate(self.members):
            if m.arch.input != inp:
                raise ValueError(f"member {i} input {m.arch.input} differs from member 0 input {inp}")
            if m.arch.shapes()[-1] != (2,):
                raise ValueError(f"member {i} does not emit two logits")

    def __len__(self) -> int:
        return len(self.members)


def ensemble_predict(ensemble: Ensemble, patches: np.ndarray) -> np.ndarray:
    """Arithmetic mean of member posteriors, summed in member order."""
    total = None
    for m in ensemble.members:
        post = Network(m.arch, m.params).predict_proba(patches)
        total = post if total is None else total + post
    return total / len(ensemble.members)


def member_seed(run_seed: int, index: int) -> int:
    return run_seed ^ index


def _train_ensemble(source: DatasetManifest, arch, hyper, seed, epochs) -> list[Checkpoint]:
    members = []
    split = partition_chronological(source, 0.7)
    members.append(train_member(extract_patches(split.train), extract_patches(split.val), arch, hyper,
                                member_seed(seed, 0), epochs, {"member": "t0", "source": source.name}))
    log.info("t0 trained: val %.4f", members[-1].meta["val_acc"])
    if len(source.angles) >= 2:
        for i, angle in enumerate(source.angles, 1):
            split = leave_one_angle_out(source, angle)
            members.append(train_member(extract_patches(split.train), extract_patches(split.val), arch, hyper,
                                        member_seed(seed, i), epochs,
                                        {"member": f"t{i}", "held_out": angle, "source": source.name}))
            log.info("t%d trained (held out %s): val %.4f", i, angle, members[-1].meta["val_acc"])
    return members


def ensemble_key(source: DatasetManifest, arch: ArchDescriptor, hyper: AdamHyper, seed: int, epochs: int) -> str:
    return digest("ensemble", source.digest(), arch.canonical_text(), hyper.to_dict(), seed, epochs)


def build_ensemble(source: DatasetManifest, arch: ArchDescriptor, hyper: AdamHyper = AdamHyper(),
                   seed: int = 0, epochs: int = EPOCHS, store: ArtifactStore | None = None) -> Ensemble:
    """t0 on the chronological 70% split, then one leave-one-angle-out member per angle.

    A single-angle source yields t0 alone, with a warning on the ensemble.
    """
    store = store or ArtifactStore()
    k = len(source.angles) if len(source.angles) >= 2 else 0
    names = [f"member-{i}.pkds" for i in range(k + 1)]
    key = ensemble_key(source, arch, hyper, seed, epochs)
    members = store.checkpoints("ensemble", key, names, lambda: _train_ensemble(source, arch, hyper, seed, epochs))
    warnings = [] if k else [f"source {source.name!r} has a single camera angle; ensemble is t0 only"]
    for w in warnings:
        log.warning(w)
    return Ensemble(members, warnings)


# --------------------------------------------------------------------------
# pseudo-labels

@dataclass(frozen=True)
class PseudoLabel:
    image: str
    spot: str
    label: int
    posterior: float
    day: int
    angle: str

    def to_dict(self) -> dict:
        return {"image": self.image, "spot": self.spot, "label": NAMES[self.label],
                "posterior": round(self.posterior, 6), "day": self.day, "angle": self.angle}


@dataclass
class PseudoLabelSet:
    labels: list[PseudoLabel]
    tau: float
    candidates: int
    wrong: int | None
    patches: PatchSet | None = None   # kept patches aligned with ``labels``; ``y`` holds the pseudo-labels

    @property
    def used(self) -> int:
        return len(self.labels)

    def stats(self) -> dict:
        return {"candidates": self.candidates, "used": self.used, "wrong": self.wrong, "tau": self.tau}

    def for_angle(self, angle: str) -> "PseudoLabelSet":
        keep = [i for i, p in enumerate(self.labels) if p.angle == angle]
        patches = self.patches.take(np.array(keep, dtype=np.int64)) if self.patches is not None else None
        # per-angle wrong counts would need ground truth, which labels do not carry
        return PseudoLabelSet([self.labels[i] for i in keep], self.tau, len(keep), None, patches)

    def attach(self, candidates: PatchSet) -> "PseudoLabelSet":
        """Materialize pixels by (image, spot) lookup in ``candidates``."""
        where = {k: i for i, k in enumerate(candidates.keys())}
        try:
            idx = np.array([where[(p.image, p.spot)] for p in self.labels], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"pseudo-label for {exc.args[0]} not found among candidate patches") from None
        patches = candidates.take(idx)
        patches.y = np.array([p.label for p in self.labels], dtype=np.int64)
        return PseudoLabelSet(self.labels, self.tau, self.candidates, self.wrong, patches)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(p.to_dict(), separators=(",", ":")) + "\n" for p in self.labels)

    def save(self, path) -> None:
        path = Path(path)
        atomic_write(path, self.to_jsonl().encode())
        atomic_write(path.with_suffix(".stats.json"), (json.dumps(self.stats(), sort_keys=True) + "\n").encode())

    @classmethod
    def from_jsonl(cls, text: str, stats: dict) -> "PseudoLabelSet":
        labels = []
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                labels.append(PseudoLabel(d["image"], d["spot"], CODES[d["label"]], float(d["posterior"]),
                                          int(d["day"]), d["angle"]))
        if len(labels) != stats["used"]:
            raise ValueError(f"stats record {stats['used']} used labels, file has {len(labels)}")
        return cls(labels, float(stats["tau"]), int(stats["candidates"]), stats.get("wrong"))

    @classmethod
    def load(cls, path) -> "PseudoLabelSet":
        path = Path(path)
        stats = json.loads(path.with_suffix(".stats.json").read_text())
        return cls.from_jsonl(path.read_text(), stats)


def select_pseudo_labels(candidates: PatchSet, posteriors: np.ndarray, tau: float) -> PseudoLabelSet:
    """Keep candidates whose max averaged posterior is strictly above ``tau``."""
    if not 0.5 <= tau < 1:
        raise ValueError(f"tau must lie in [0.5, 1), got {tau}")
    if len(candidates) != len(posteriors):
        raise ValueError("one posterior row per candidate patch is required")
    if len(candidates) == 0:
        return PseudoLabelSet([], tau, 0, 0, candidates)
    pred = predict(posteriors)
    conf = posteriors.max(axis=1)
    keep = np.flatnonzero(conf > tau)
    labels = [PseudoLabel(str(candidates.image[i]), str(candidates.spot[i]), int(pred[i]), float(conf[i]),
                          int(candidates.day[i]), str(candidates.angle[i])) for i in keep]
    wrong = None
    if candidates.labeled:
        wrong = int(np.sum(pred[keep] != candidates.y[keep]))
    patches = candidates.take(keep)
    patches.y = pred[keep].astype(np.int64)
    return PseudoLabelSet(labels, tau, len(candidates), wrong, patches)


def pseudo_label(ensemble: Ensemble, target: DatasetManifest, tau: float = 0.9) -> PseudoLabelSet:
    """Label every spot of ``target`` (normally the first n days) with the ensemble."""
    candidates = extract_patches(target)
    if len(candidates) == 0:
        return select_pseudo_labels(candidates, np.zeros((0, 2)), tau)
    return select_pseudo_labels(candidates, ensemble_predict(ensemble, candidates.x), tau)


def true_label_set(candidates: PatchSet) -> PseudoLabelSet:
    """Oracle stand-in for a pseudo-label set: every candidate with its ground truth."""
    if not candidates.labeled:
        raise ValueError("true-label oracle needs ground truth on every candidate")
    labels = [PseudoLabel(str(candidates.image[i]), str(candidates.spot[i]), int(candidates.y[i]), 1.0,
                          int(candidates.day[i]), str(candidates.angle[i])) for i in range(len(candidates))]
    return PseudoLabelSet(labels, 0.5, len(candidates), 0, candidates)
