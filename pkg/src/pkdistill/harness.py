"""Cross-domain experiments: main comparison, day and threshold sweeps, oracle ceiling."""
from __future__ import annotations

import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data.manifest import DatasetManifest, parse_manifest
from .data.patches import PatchSet, extract_patches
from .data.splits import take_days
from .labels import EMPTY, OCCUPIED, predict
from .nn.adam import AdamHyper
from .nn.arch import ArchDescriptor, resolve_arch
from .nn.checkpoint import Checkpoint
from .nn.network import Network
from .nn.training import EPOCHS
from .store import ArtifactStore, derive_seed, digest
from .student import FreezePolicy, finetune, make_finetune_split, pretrain_student
from .teacher import Ensemble, PseudoLabelSet, build_ensemble, ensemble_key, ensemble_predict, \
    select_pseudo_labels, true_label_set

log = logging.getLogger(__name__)

CONDITIONS = ("teacher", "student_raw", "student_ft", "oracle")
SWEEP_EXCLUDE = 14
STD_NOTE = "acc_std is the population standard deviation over seeds (divisor = number of seeds)"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, seed: int, cause: BaseException):
        super().__init__(f"stage {stage} failed for seed {seed}: {cause}")
        self.stage, self.seed, self.cause = stage, seed, cause


# --------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class Confusion:
    """Rows are true classes, columns predictions, both in label-code order."""

    counts: tuple[tuple[int, int], tuple[int, int]]

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    @property
    def correct(self) -> int:
        return self.counts[OCCUPIED][OCCUPIED] + self.counts[EMPTY][EMPTY]


def confusion(pred: np.ndarray, truth: np.ndarray) -> Confusion:
    c = np.zeros((2, 2), np.int64)
    np.add.at(c, (truth, pred), 1)
    return Confusion(tuple(tuple(int(v) for v in row) for row in c))


def accuracy(model, patches: PatchSet) -> tuple[float, Confusion]:
    """Accuracy and confusion of a checkpoint, an ensemble, or raw posteriors against true labels."""
    if len(patches) == 0:
        raise ValueError("accuracy: empty test set")
    if not patches.labeled:
        raise ValueError("accuracy: test set lacks ground truth")
    if isinstance(model, Ensemble):
        post = ensemble_predict(model, patches.x)
    elif isinstance(model, Checkpoint):
        post = Network(model.arch, model.params).predict_proba(patches.x)
    else:
        post = np.asarray(model)
    conf = confusion(predict(post), patches.y)
    return conf.correct / conf.total, conf


def weighted_average(pairs) -> float:
    """Sample-weighted mean of (accuracy, n_samples) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("weighted_average: no datasets")
    if any(n <= 0 for _, n in pairs):
        raise ValueError("weighted_average: every dataset needs n_samples > 0")
    return sum(a * n for a, n in pairs) / sum(n for _, n in pairs)


def mean_std(values) -> tuple[float, float]:
    values = list(values)
    return statistics.fmean(values), statistics.pstdev(values)


# --------------------------------------------------------------------------
# configuration

def _load(m) -> DatasetManifest:
    return m if isinstance(m, DatasetManifest) else parse_manifest(m)


@dataclass
class ExperimentConfig:
    source: object                      # manifest path or DatasetManifest
    target: object
    n_days: int = 7
    tau: float = 0.9
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    teacher_arch: object = "teacher"
    student_arch: object = "student"
    exclude_days_for_test: int | None = None   # None means n_days
    freeze: str = "all_layers"
    epochs: int = EPOCHS
    hyper: AdamHyper = field(default_factory=AdamHyper)
    oracle: bool = False

    def __post_init__(self):
        if self.n_days < 2:
            raise ValueError(f"n_days must be >= 2, got {self.n_days}")
        if not 0.5 <= self.tau < 1:
            raise ValueError(f"tau must lie in [0.5, 1), got {self.tau}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        self.seeds = tuple(int(s) for s in self.seeds)
        FreezePolicy(self.freeze)

    @property
    def exclude(self) -> int:
        return self.n_days if self.exclude_days_for_test is None else self.exclude_days_for_test

    def archs(self) -> tuple[ArchDescriptor, ArchDescriptor]:
        return resolve_arch(self.teacher_arch), resolve_arch(self.student_arch)

    def to_dict(self) -> dict:
        def name(m):
            return m.name if isinstance(m, DatasetManifest) else str(m)
        t, s = self.archs()
        return {"source": name(self.source), "target": name(self.target), "n_days": self.n_days,
                "tau": self.tau, "seeds": list(self.seeds), "teacher_arch": t.to_dict(),
                "student_arch": s.to_dict(), "exclude_days_for_test": self.exclude, "freeze": self.freeze,
                "epochs": self.epochs, "hyper": self.hyper.to_dict(), "oracle": self.oracle}


# --------------------------------------------------------------------------
# a single seed of one direction

@dataclass
class SeedResult:
    seed: int
    direction: str
    n_test: int
    correct: dict[str, int]
    per_angle: dict[str, dict[str, float]]
    candidates: int
    used: int
    wrong: int | None

    def acc(self, condition: str) -> float:
        return self.correct[condition] / self.n_test


def teacher_posteriors(ensemble: Ensemble, target: PatchSet, key: str, store: ArtifactStore) -> np.ndarray:
    """Averaged posteriors over every target patch, computed once per ensemble."""
    return store.memo(("posteriors", key), lambda: ensemble_predict(ensemble, target.x))


def direction_name(source: DatasetManifest, target: DatasetManifest) -> str:
    return f"{source.name}→{target.name}"


def _stage(name, seed, fn):
    try:
        return fn()
    except PipelineError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with stage context
        raise PipelineError(name, seed, exc) from exc


def prepare(cfg: ExperimentConfig, source: DatasetManifest, target: DatasetManifest, seed: int,
            store: ArtifactStore):
    """Teacher, pretrained student and averaged target posteriors for one seed."""
    t_arch, s_arch = cfg.archs()
    ens = _stage("train-teacher", seed,
                 lambda: build_ensemble(source, t_arch, cfg.hyper, seed, cfg.epochs, store))
    student = _stage("pretrain-student", seed, lambda: pretrain_student(
        source, s_arch, cfg.hyper, derive_seed(seed, "student"), cfg.epochs, store))
    patches = _stage("extract", seed, lambda: extract_patches(target))
    key = digest(ensemble_key(source, t_arch, cfg.hyper, seed, cfg.epochs), target.digest())
    post = _stage("teacher-predict", seed, lambda: teacher_posteriors(ens, patches, key, store))
    return ens, student, patches, post


def pseudo_labels_for(patches: PatchSet, post: np.ndarray, n: int, tau: float) -> PseudoLabelSet:
    first = patches.day < n
    return select_pseudo_labels(patches.take(first), post[first], tau)


def finetune_angles(cfg: ExperimentConfig, student: Checkpoint, labels: PseudoLabelSet, angles, n: int,
                    seed: int, source_name: str, store: ArtifactStore, tag: str) -> dict[str, Checkpoint]:
    """One fine-tuned student per target camera angle, each seeing only its own angle's labels."""
    out = {}
    for a in angles:
        part = labels.for_angle(a)
        split = make_finetune_split(part, n)
        meta = {"source": source_name, "angle": a, "n": n, "tau": labels.tau, "labels": tag}
        out[a] = finetune(student, split, cfg.hyper, FreezePolicy(cfg.freeze),
                          derive_seed(seed, "finetune", a), cfg.epochs, meta, store)
    return out


def _per_angle_correct(models: dict[str, Checkpoint], test: PatchSet) -> tuple[int, dict[str, float]]:
    correct, per = 0, {}
    for a, ck in models.items():
        part = test.take(test.angle == a)
        if len(part) == 0:
            continue
        acc, conf = accuracy(ck, part)
        correct += conf.correct
        per[a] = acc
    return correct, per


def run_seed(cfg: ExperimentConfig, source: DatasetManifest, target: DatasetManifest, seed: int,
             store: ArtifactStore, tau: float | None = None, n: int | None = None,
             conditions=("teacher", "student_raw", "student_ft")) -> SeedResult:
    tau = cfg.tau if tau is None else tau
    n = cfg.n_days if n is None else n
    ens, student, patches, post = prepare(cfg, source, target, seed, store)
    test_mask = patches.day >= cfg.exclude
    test = patches.take(test_mask)
    if len(test) == 0:
        raise PipelineError("evaluate", seed, ValueError(f"no target patches on days >= {cfg.exclude}"))
    labels = pseudo_labels_for(patches, post, n, tau)
    correct, per_angle = {}, {}
    if "teacher" in conditions:
        _, conf = accuracy(post[test_mask], test)
        correct["teacher"] = conf.correct
        per_angle["teacher"] = {a: accuracy(post[test_mask][test.angle == a], test.take(test.angle == a))[0]
                                for a in target.angles if np.any(test.angle == a)}
    if "student_raw" in conditions:
        correct["student_raw"], per_angle["student_raw"] = _per_angle_correct(
            {a: student for a in target.angles}, test)
    if "student_ft" in conditions:
        models = _stage("finetune", seed, lambda: finetune_angles(
            cfg, student, labels, target.angles, n, seed, source.name, store, "pseudo"))
        correct["student_ft"], per_angle["student_ft"] = _per_angle_correct(models, test)
    if "oracle" in conditions:
        first = patches.take(patches.day < n)
        models = _stage("finetune-oracle", seed, lambda: finetune_angles(
            cfg, student, true_label_set(first), target.angles, n, seed, source.name, store, "true"))
        correct["oracle"], per_angle["oracle"] = _per_angle_correct(models, test)
    return SeedResult(seed, direction_name(source, target), len(test), correct, per_angle,
                      labels.candidates, labels.used, labels.wrong)


# --------------------------------------------------------------------------
# reports

@dataclass
class MetricsReport:
    config: dict
    rows: list[dict]
    per_angle: list[dict] = field(default_factory=list)
    per_seed: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def row(self, condition: str, direction: str, **match) -> dict:
        for r in self.rows:
            if r["condition"] == condition and r["direction"] == direction and \
                    all(r.get(k) == v for k, v in match.items()):
                return r
        raise KeyError(f"no row for {condition} / {direction} {match}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, ensure_ascii=False) + "\n"

    def to_text(self) -> str:
        head = f"{'direction':<12} {'condition':<12} {'n':>3} {'tau':>5} {'accuracy':>17} {'used':>8} {'wrong':>7}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            acc = f"{100 * r['acc_mean']:6.2f}% ± {100 * r['acc_std']:5.2f}"
            used = "" if r["used"] is None else f"{r['used']:.1f}"
            wrong = "" if r["wrong"] is None else f"{r['wrong']:.1f}"
            tau = "" if r["tau"] is None else f"{r['tau']:.2f}"
            lines.append(f"{r['direction']:<12} {r['condition']:<12} {r['n']:>3} {tau:>5} {acc:>17} "
                         f"{used:>8} {wrong:>7}")
        if self.per_angle:
            lines += ["", f"{'direction':<12} {'condition':<12} {'angle':<12} {'accuracy':>17}"]
            for r in self.per_angle:
                lines.append(f"{r['direction']:<12} {r['condition']:<12} {r['angle']:<12} "
                             f"{100 * r['acc_mean']:6.2f}% ± {100 * r['acc_std']:5.2f}")
        lines += [""] + [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def save(self, stem) -> tuple[Path, Path]:
        from .store import atomic_write
        stem = Path(stem)
        js, txt = stem.with_suffix(".json"), stem.with_suffix(".txt")
        atomic_write(js, self.to_json().encode())
        atomic_write(txt, self.to_text().encode())
        return js, txt


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return statistics.fmean(values) if values else None


def aggregate(results: list[SeedResult], n: int, tau: float | None) -> tuple[list[dict], list[dict]]:
    """Per-direction rows in seed order, then a test-size-weighted row per condition."""
    rows, angle_rows = [], []
    directions = list(dict.fromkeys(r.direction for r in results))
    conditions = [c for c in CONDITIONS if c in results[0].correct]
    for d in directions:
        rs = [r for r in results if r.direction == d]
        for c in conditions:
            m, s = mean_std(r.acc(c) for r in rs)
            pseudo = c == "student_ft"
            oracle = c == "oracle"
            used = _mean_or_none(r.used for r in rs) if pseudo else (
                _mean_or_none(r.candidates for r in rs) if oracle else None)
            wrong = _mean_or_none(r.wrong for r in rs) if pseudo else (0.0 if oracle else None)
            rows.append({"condition": c, "direction": d, "n": n, "tau": tau if pseudo else None,
                         "acc_mean": m, "acc_std": s, "used": used, "wrong": wrong,
                         "n_test": rs[0].n_test, "per_seed": [r.acc(c) for r in rs]})
            for a in rs[0].per_angle[c]:
                am, asd = mean_std(r.per_angle[c][a] for r in rs)
                angle_rows.append({"condition": c, "direction": d, "angle": a, "acc_mean": am, "acc_std": asd})
    if len(directions) > 1:
        for c in conditions:
            base = [r for r in rows if r["condition"] == c and r["direction"] in directions]
            per_seed = [weighted_average((row["per_seed"][i], row["n_test"]) for row in base)
                        for i in range(len(base[0]["per_seed"]))]
            m = weighted_average((row["acc_mean"], row["n_test"]) for row in base)
            rows.append({"condition": c, "direction": "weighted", "n": n, "tau": base[0]["tau"],
                         "acc_mean": m, "acc_std": statistics.pstdev(per_seed), "used": None, "wrong": None,
                         "n_test": sum(row["n_test"] for row in base), "per_seed": per_seed})
    return rows, angle_rows


def _notes(cfg: ExperimentConfig) -> list[str]:
    return [STD_NOTE,
            "teacher members and the student are trained from scratch on the source domain (no ImageNet stage)",
            "a single student architecture is evaluated; pooled accuracy is over all target angles",
            f"test set: target days >= {cfg.exclude}"]


def _directions(cfg: ExperimentConfig, both: bool):
    src, tgt = _load(cfg.source), _load(cfg.target)
    if src.digest() == tgt.digest():
        raise ValueError("source and target manifests are identical")
    return [(src, tgt), (tgt, src)] if both else [(src, tgt)]


def run_main_experiment(cfg: ExperimentConfig, store: ArtifactStore | None = None,
                        both_directions: bool = True) -> MetricsReport:
    """Teacher, raw student and fine-tuned student (plus the oracle when enabled), per seed and direction."""
    store = store or ArtifactStore()
    conds = ("teacher", "student_raw", "student_ft") + (("oracle",) if cfg.oracle else ())
    results = []
    for src, tgt in _directions(cfg, both_directions):
        for seed in cfg.seeds:
            log.info("%s seed %d", direction_name(src, tgt), seed)
            results.append(run_seed(cfg, src, tgt, seed, store, conditions=conds))
    rows, angles = aggregate(results, cfg.n_days, cfg.tau)
    per_seed = [{"direction": r.direction, "seed": r.seed, "candidates": r.candidates, "used": r.used,
                 "wrong": r.wrong, "n_test": r.n_test, "correct": r.correct} for r in results]
    return MetricsReport(cfg.to_dict(), rows, angles, per_seed, _notes(cfg))


def sweep_days(cfg: ExperimentConfig, n_range=range(6, 15), store: ArtifactStore | None = None,
               both_directions: bool = True) -> MetricsReport:
    """Fine-tuned student accuracy per n, always tested on days >= 14."""
    store = store or ArtifactStore()
    n_range = list(n_range)
    sweep = ExperimentConfig(**{**cfg.__dict__, "exclude_days_for_test": SWEEP_EXCLUDE})
    pairs = _directions(sweep, both_directions)
    for _, tgt in pairs:
        n_days = len(tgt.days())
        if n_days < SWEEP_EXCLUDE + 1:
            raise ValueError(f"day sweep needs a target with >= {SWEEP_EXCLUDE + 1} days; "
                             f"{tgt.name} has {n_days}")
        bad = [n for n in n_range if not 2 <= n <= min(n_days - 1, SWEEP_EXCLUDE)]
        if bad:
            raise ValueError(f"n values {bad} outside [2, {min(n_days - 1, SWEEP_EXCLUDE)}]")
    rows, angles = [], []
    for n in n_range:
        results = [run_seed(sweep, src, tgt, s, store, n=n, conditions=("student_ft",))
                   for src, tgt in pairs for s in sweep.seeds]
        r, a = aggregate(results, n, sweep.tau)
        rows += r
        angles += a
    return MetricsReport(sweep.to_dict(), rows, angles, [], _notes(sweep))


def sweep_threshold(cfg: ExperimentConfig, taus=(0.5, 0.6, 0.7, 0.8, 0.9), include_oracle: bool = True,
                    store: ArtifactStore | None = None, both_directions: bool = True) -> MetricsReport:
    """Fine-tuned student accuracy and pseudo-label counts per tau, then the true-label ceiling."""
    store = store or ArtifactStore()
    rows, angles, notes = [], [], _notes(cfg)
    pairs, truthful = _directions(cfg, both_directions), []
    for src, tgt in pairs:
        if extract_patches(take_days(tgt, "first_n", cfg.n_days)).labeled:
            truthful.append((src, tgt))
        else:
            notes.append(f"{tgt.name}: ground truth missing; wrong counts unavailable and oracle row skipped")
    for tau in taus:
        results = [run_seed(cfg, src, tgt, s, store, tau=tau, conditions=("student_ft",))
                   for src, tgt in pairs for s in cfg.seeds]
        r, a = aggregate(results, cfg.n_days, tau)
        rows += r
        angles += a
    if include_oracle and truthful:
        results = [run_seed(cfg, src, tgt, s, store, conditions=("oracle",))
                   for src, tgt in truthful for s in cfg.seeds]
        r, a = aggregate(results, cfg.n_days, None)
        rows += r
        angles += a
    return MetricsReport(cfg.to_dict(), rows, angles, [], notes)


def pseudo_label_counts(cfg: ExperimentConfig, source: DatasetManifest, target: DatasetManifest, seed: int,
                        taus, store: ArtifactStore | None = None) -> list[PseudoLabelSet]:
    """Pseudo-label sets of one fixed ensemble across thresholds (no student training)."""
    store = store or ArtifactStore()
    t_arch, _ = cfg.archs()
    ens = build_ensemble(source, t_arch, cfg.hyper, seed, cfg.epochs, store)
    patches = extract_patches(target)
    key = digest(ensemble_key(source, t_arch, cfg.hyper, seed, cfg.epochs), target.digest())
    post = teacher_posteriors(ens, patches, key, store)
    return [pseudo_labels_for(patches, post, cfg.n_days, tau) for tau in taus]
