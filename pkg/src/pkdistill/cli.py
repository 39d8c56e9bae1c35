"""Command-line entry point: ``pkdistill <command> [--config run.json] [--set key=value ...]``.

Exit codes: 0 success, 1 pipeline failure, 2 usage error, 3 config error.
Errors are printed to stderr as one line: ``error: <kind>: <message>``.
"""
from __future__ import annotations

import argparse
import contextlib
import copy
import fcntl
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from .costmodel import REFERENCE_SCENARIOS, BandwidthScenario, bandwidth_estimate, latency_probe, summary_line
from .data.manifest import ManifestError, parse_manifest
from .data.patches import extract_patches
from .data.splits import take_days
from .data.synth import SynthSpec, benchmark_spec, synth_generate
from .harness import (
    ExperimentConfig, PipelineError, direction_name, finetune_angles, pseudo_labels_for, run_main_experiment,
    sweep_days, sweep_threshold, teacher_posteriors,
)
from .nn.adam import AdamHyper
from .nn.arch import ArchError, resolve_arch
from .nn.checkpoint import Checkpoint
from .nn.gradcheck import grad_check
from .nn.network import init_params
from .store import ArtifactStore, MissingArtifact, atomic_write, derive_seed, digest
from .student import FreezePolicy, pretrain_student
from .teacher import PseudoLabelSet, build_ensemble, ensemble_key, true_label_set

log = logging.getLogger("pkdistill")

EXIT_PIPELINE, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3
GRADCHECK_TOL = 1e-4

DEFAULTS = {
    "seed": 0,
    "seeds": [0, 1, 2, 3, 4],
    "source": None,
    "target": None,
    "both_directions": True,
    "n_days": 7,
    "tau": 0.9,
    "exclude_days_for_test": None,
    "teacher_arch": "teacher",
    "student_arch": "student",
    "freeze": "all_layers",
    "epochs": 20,
    "adam": AdamHyper().to_dict(),
    "oracle": False,
    "sweep": {"n_range": [6, 14], "taus": [0.5, 0.6, 0.7, 0.8, 0.9], "oracle": True},
    "synth": {},
    "cost": {"n_cameras": 1000, "interval_seconds": 30, "avg_image_bytes": 291667, "resolution": "1280x720"},
}


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict) and k not in ("synth",):
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, pairs) -> dict:
    """``a.b=value`` sets cfg["a"]["b"]; values parse as JSON when they can."""
    cfg = copy.deepcopy(cfg)
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node and node is cfg:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return cfg


def load_config(args) -> tuple[dict, Path]:
    """Defaults, then the config file, then ``--set`` overrides, then ``--seed``."""
    base = Path.cwd()
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        cfg = _merge(cfg, doc)
        base = path.resolve().parent
    cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg["seeds"] = [args.seed]
    for key in ("source", "target"):
        if cfg[key] is not None:
            cfg[key] = str((base / cfg[key]).resolve()) if not os.path.isabs(cfg[key]) else cfg[key]
    _validate(cfg)
    return cfg, base


def _validate(cfg: dict) -> None:
    try:
        ints = [int(s) for s in cfg["seeds"]]
        if not ints or any(str(i) != str(s) for i, s in zip(ints, cfg["seeds"])):
            raise ValueError
    except (TypeError, ValueError):
        raise ConfigError("seeds must be a non-empty list of integers") from None
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    if not isinstance(cfg["n_days"], int) or cfg["n_days"] < 2:
        raise ConfigError(f"n_days must be an integer >= 2, got {cfg['n_days']!r}")
    if not isinstance(cfg["tau"], (int, float)) or not 0.5 <= cfg["tau"] < 1:
        raise ConfigError(f"tau must lie in [0.5, 1), got {cfg['tau']!r}")
    if not isinstance(cfg["epochs"], int) or cfg["epochs"] < 1:
        raise ConfigError(f"epochs must be a positive integer, got {cfg['epochs']!r}")
    try:
        FreezePolicy(cfg["freeze"])
        AdamHyper(**cfg["adam"])
        resolve_arch(cfg["teacher_arch"])
        resolve_arch(cfg["student_arch"])
    except (ValueError, TypeError, ArchError) as exc:
        raise ConfigError(str(exc)) from None


def config_digest(cfg: dict) -> str:
    """Digest of the resolved config with manifest paths replaced by their content hashes."""
    doc = dict(cfg)
    for key in ("source", "target"):
        if doc[key] is not None and Path(doc[key]).is_file():
            doc[key] = hashlib.sha256(Path(doc[key]).read_bytes()).hexdigest()
    doc["synth"] = {k: {kk: vv for kk, vv in v.items() if kk != "out"} if isinstance(v, dict) else v
                    for k, v in (doc["synth"] or {}).items()}
    return digest("config", doc)


def _require(cfg: dict, *keys) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"missing required config key(s): {', '.join(missing)} "
                          f"(set them in the config file or with --set key=value)")


def experiment(cfg: dict) -> ExperimentConfig:
    _require(cfg, "source", "target")
    try:
        src, tgt = parse_manifest(cfg["source"]), parse_manifest(cfg["target"])
    except FileNotFoundError as exc:
        raise ConfigError(f"manifest not found: {exc.filename}") from None
    except ManifestError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(src, tgt, cfg["n_days"], float(cfg["tau"]), tuple(cfg["seeds"]), cfg["teacher_arch"],
                            cfg["student_arch"], cfg["exclude_days_for_test"], cfg["freeze"], cfg["epochs"],
                            AdamHyper(**cfg["adam"]), bool(cfg["oracle"]))


def _pairs(exp: ExperimentConfig, both: bool):
    return [(exp.source, exp.target), (exp.target, exp.source)] if both else [(exp.source, exp.target)]


# --------------------------------------------------------------------------
# workdir

def resolve_workdir(args, cfg) -> Path:
    wd = args.workdir or os.environ.get("PKDISTILL_WORKDIR")
    if not wd:
        raise ConfigError("no work dir: pass --workdir or set PKDISTILL_WORKDIR")
    path = Path(wd)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / f".probe{os.getpid()}"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"work dir {path} is not writable: {exc.strerror}") from None
    return path


@contextlib.contextmanager
def workdir_lock(path: Path):
    with open(path / ".lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def run_dir(wd: Path, cfg: dict) -> Path:
    return wd / "runs" / config_digest(cfg)


def _pseudo_path(wd: Path, cfg: dict, src, tgt, seed: int) -> Path:
    return run_dir(wd, cfg) / "pseudo-labels" / f"{src.name}-to-{tgt.name}-seed{seed}.jsonl"


def _write_json(path: Path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n").encode())


# --------------------------------------------------------------------------
# commands

def cmd_synth(args, cfg, wd):
    jobs = []
    if args.spec:
        if not args.out:
            raise UsageError("synth --spec needs --out")
        try:
            spec = SynthSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ConfigError(f"spec file not found: {args.spec}") from None
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ConfigError(f"{args.spec}: invalid synth spec ({exc})") from None
        jobs.append((spec, Path(args.out)))
    else:
        specs = cfg["synth"] or {}
        if not specs:
            raise ConfigError("synth needs --spec/--out or a 'synth' config section "
                              "({\"A\": {\"out\": ..., \"spec\": {...} | \"benchmark\"}})")
        for name, entry in sorted(specs.items()):
            if not isinstance(entry, dict) or "out" not in entry:
                raise ConfigError(f"synth.{name}: missing 'out'")
            raw = entry.get("spec", "benchmark")
            try:
                spec = benchmark_spec(name) if raw == "benchmark" else SynthSpec.from_dict(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"synth.{name}: {exc}") from None
            out = Path(entry["out"])
            jobs.append((spec, out if out.is_absolute() else args.base / out))
    for spec, out in jobs:
        meta = out / "synth.json"
        if meta.exists() and (out / "manifest.jsonl").exists():
            try:
                same = json.loads(meta.read_text(encoding="utf-8")).get("digest") == spec.digest()
            except json.JSONDecodeError:
                same = False
            if same:
                print(f"synth {spec.domain_name}: up-to-date digest={spec.digest()} out={out}")
                continue
        m = synth_generate(spec, out)
        print(f"synth {spec.domain_name}: wrote {len(m.records)} images, {m.n_spots} spots "
              f"digest={spec.digest()} out={out}")


def cmd_train_teacher(args, cfg, wd):
    exp = experiment(cfg)
    t_arch, _ = exp.archs()
    store = ArtifactStore(wd / "store")
    for src, _ in _pairs(exp, cfg["both_directions"]):
        for seed in exp.seeds:
            ens = build_ensemble(src, t_arch, exp.hyper, seed, exp.epochs, store)
            key = ensemble_key(src, t_arch, exp.hyper, seed, exp.epochs)
            print(f"ensemble source={src.name} seed={seed} members={len(ens)} "
                  f"path={store.path('ensemble', key, '')}")
            for w in ens.warnings:
                print(f"warning: {w}")


def cmd_pseudo_label(args, cfg, wd):
    exp = experiment(cfg)
    t_arch, _ = exp.archs()
    store = ArtifactStore(wd / "store", readonly=True)
    for src, tgt in _pairs(exp, cfg["both_directions"]):
        patches = extract_patches(tgt)
        for seed in exp.seeds:
            ens = build_ensemble(src, t_arch, exp.hyper, seed, exp.epochs, store)
            key = digest(ensemble_key(src, t_arch, exp.hyper, seed, exp.epochs), tgt.digest())
            post = teacher_posteriors(ens, patches, key, store)
            labels = pseudo_labels_for(patches, post, exp.n_days, exp.tau)
            path = _pseudo_path(wd, cfg, src, tgt, seed)
            labels.save(path)
            s = labels.stats()
            print(f"pseudo-labels {direction_name(src, tgt)} seed={seed} candidates={s['candidates']} "
                  f"used={s['used']} wrong={s['wrong']} path={path}")


def cmd_finetune(args, cfg, wd):
    exp = experiment(cfg)
    _, s_arch = exp.archs()
    store = ArtifactStore(wd / "store")
    for src, tgt in _pairs(exp, cfg["both_directions"]):
        first = extract_patches(take_days(tgt, "first_n", exp.n_days))
        for seed in exp.seeds:
            path = _pseudo_path(wd, cfg, src, tgt, seed)
            if not path.exists():
                raise MissingArtifact(f"missing pseudo-labels: {path} (run pseudo-label first)")
            labels = PseudoLabelSet.load(path).attach(first)
            student = pretrain_student(src, s_arch, exp.hyper, derive_seed(seed, "student"), exp.epochs, store)
            runs = [("pseudo", labels)] + ([("true", true_label_set(first))] if exp.oracle else [])
            for tag, ls in runs:
                models = finetune_angles(exp, student, ls, tgt.angles, exp.n_days, seed, src.name, store, tag)
                for a, ck in models.items():
                    print(f"finetuned {direction_name(src, tgt)} seed={seed} labels={tag} angle={a} "
                          f"epoch={ck.meta['epoch']} val_acc={ck.meta['val_acc']:.4f}")


def _emit(report, wd, cfg, stem):
    report.config["config_digest"] = config_digest(cfg)
    report.config["seed"] = cfg["seed"]
    out = run_dir(wd, cfg) / stem
    js, txt = report.save(out)
    sys.stdout.write(report.to_text())
    print(f"report {js}")
    print(f"report {txt}")


def cmd_evaluate(args, cfg, wd):
    exp = experiment(cfg)
    store = ArtifactStore(wd / "store", readonly=True)
    report = run_main_experiment(exp, store, cfg["both_directions"])
    _emit(report, wd, cfg, "report")


def cmd_sweep_days(args, cfg, wd):
    exp = experiment(cfg)
    lo, hi = cfg["sweep"]["n_range"]
    report = sweep_days(exp, range(lo, hi + 1), ArtifactStore(wd / "store"), cfg["both_directions"])
    _emit(report, wd, cfg, "sweep-days")


def cmd_sweep_threshold(args, cfg, wd):
    exp = experiment(cfg)
    report = sweep_threshold(exp, tuple(cfg["sweep"]["taus"]), bool(cfg["sweep"]["oracle"]),
                             ArtifactStore(wd / "store"), cfg["both_directions"])
    _emit(report, wd, cfg, "sweep-threshold")


def cmd_cost(args, cfg, wd):
    try:
        scenario = BandwidthScenario(**cfg["cost"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cost: {exc}") from None
    out = {"bandwidth": {"scenario": scenario.__dict__, "gb_per_hour": bandwidth_estimate(scenario),
                         "summary": summary_line(scenario), "gb": "decimal (1e9 bytes)"},
           "reference_scenarios": {k: {"scenario": s.__dict__, "gb_per_hour": bandwidth_estimate(s)}
                                   for k, s in REFERENCE_SCENARIOS.items()}}
    if args.latency:
        _require(cfg, "target")
        try:
            m = parse_manifest(cfg["target"])
        except FileNotFoundError as exc:
            raise ConfigError(f"manifest not found: {exc.filename}") from None
        rec = next((r for r in m.records if r.spots), m.records[0])
        if args.checkpoint:
            ck = Checkpoint.load(args.checkpoint)
        else:
            import numpy as np
            arch = resolve_arch(cfg["student_arch"])
            ck = Checkpoint(arch, init_params(arch, np.random.default_rng(cfg["seed"])))
        rep = latency_probe(ck, Path(m.root) / rec.image_path, [s.quad for s in rec.spots], args.repeats)
        out["latency"] = rep.to_dict()
    wd_out = wd / "cost" / f"{config_digest(cfg)}.json"
    _write_json(wd_out, out)
    print(json.dumps(out, indent=1, sort_keys=True, ensure_ascii=False))
    print(summary_line(scenario))


def cmd_gradcheck(args, cfg, wd):
    arch = resolve_arch(args.arch or cfg["student_arch"])
    rep = grad_check(arch, seed=cfg["seed"])
    print(f"gradcheck max_rel_error={rep.max_rel_error:.3e} checked={rep.checked} skipped={rep.skipped}")
    for i, err in enumerate(rep.per_tensor):
        print(f"  tensor {i}: {err:.3e}")
    if not rep.max_rel_error < GRADCHECK_TOL:
        raise PipelineError("gradcheck", cfg["seed"],
                            ValueError(f"max relative error {rep.max_rel_error:.3e} >= {GRADCHECK_TOL}"))


COMMANDS = {
    "synth": cmd_synth, "train-teacher": cmd_train_teacher, "pseudo-label": cmd_pseudo_label,
    "finetune": cmd_finetune, "evaluate": cmd_evaluate, "sweep-days": cmd_sweep_days,
    "sweep-threshold": cmd_sweep_threshold, "cost": cmd_cost, "gradcheck": cmd_gradcheck,
}
NEEDS_WORKDIR = {"train-teacher", "pseudo-label", "finetune", "evaluate", "sweep-days", "sweep-threshold", "cost"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="run a single seed (overrides seed and seeds)")
    common.add_argument("--workdir", help="artifact directory (default: $PKDISTILL_WORKDIR)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dot path)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="pkdistill", description="Teacher/student parking occupancy pipeline.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    s = sub.add_parser("synth", parents=[common], help="render a synthetic lot")
    s.add_argument("--spec", help="SynthSpec JSON file")
    s.add_argument("--out", help="output directory")
    sub.add_parser("train-teacher", parents=[common], help="train the source ensemble")
    sub.add_parser("pseudo-label", parents=[common], help="label the first n target days")
    sub.add_parser("finetune", parents=[common], help="pretrain and fine-tune per-angle students")
    sub.add_parser("evaluate", parents=[common], help="main experiment report from existing artifacts")
    sub.add_parser("sweep-days", parents=[common], help="accuracy versus pseudo-labelled days")
    sub.add_parser("sweep-threshold", parents=[common], help="accuracy versus posterior threshold")
    c = sub.add_parser("cost", parents=[common], help="bandwidth model and latency probe")
    c.add_argument("--latency", action="store_true", help="also time load/crop/classify on one target image")
    c.add_argument("--checkpoint", help="student checkpoint for --latency (default: random weights)")
    c.add_argument("--repeats", type=int, default=10)
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    g.add_argument("--arch", help="named arch (default: config student_arch)")
    return p


def _fail(kind: str, msg: str, code: int) -> int:
    print(f"error: {kind}: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, args.base = load_config(args)
        print(f"seed={cfg['seed']} seeds={','.join(map(str, cfg['seeds']))} config_digest={config_digest(cfg)}")
        wd = resolve_workdir(args, cfg) if args.command in NEEDS_WORKDIR or args.workdir else None
        lock = workdir_lock(wd) if wd is not None else contextlib.nullcontext()
        with lock:
            COMMANDS[args.command](args, cfg, wd)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail("usage", exc, EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except MissingArtifact as exc:
        return _fail("pipeline", exc, EXIT_PIPELINE)
    except PipelineError as exc:
        if isinstance(exc.cause, MissingArtifact):
            return _fail("pipeline", f"{exc.cause} (stage {exc.stage}, seed {exc.seed})", EXIT_PIPELINE)
        return _fail("pipeline", exc, EXIT_PIPELINE)
    except (ValueError, OSError, ManifestError) as exc:
        return _fail("pipeline", exc, EXIT_PIPELINE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
