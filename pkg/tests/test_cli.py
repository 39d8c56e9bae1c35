import json

import pytest

from pkdistill.cli import DEFAULTS, ConfigError, apply_overrides, main
from pkdistill.data import SynthSpec, SynthStyle
from pkdistill.nn import ArchDescriptor, Dense, Flatten, MaxPool2x2

TINY = ArchDescriptor((32, 32, 3), (MaxPool2x2(), MaxPool2x2(), Flatten(), Dense(2))).to_dict()


def _spec(name, seed, **style):
    return SynthSpec(name, 10, 2, 1, 3, SynthStyle(**style), seed=seed).to_dict()


@pytest.fixture
def project(tmp_path):
    """A config whose synth section renders two tiny lots next to it."""
    cfg = {
        "source": "data/A/manifest.jsonl",
        "target": "data/B/manifest.jsonl",
        "seeds": [0],
        "n_days": 4,
        "tau": 0.55,
        "epochs": 2,
        "teacher_arch": TINY,
        "student_arch": TINY,
        "synth": {"A": {"out": "data/A", "spec": _spec("A", 0, overhang=0.2)},
                  "B": {"out": "data/B", "spec": _spec("B", 1, base_hue=0.6, contrast=0.6)}},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_synth_is_idempotent(tmp_path, capsys):
    spec = tmp_path / "a.json"
    spec.write_text(json.dumps(_spec("A", 0)))
    code, out1, _ = _run(capsys, "synth", "--spec", spec, "--out", tmp_path / "A")
    assert code == 0 and "wrote" in out1
    manifest = (tmp_path / "A" / "manifest.jsonl").read_bytes()
    code, out2, _ = _run(capsys, "synth", "--spec", spec, "--out", tmp_path / "A")
    assert code == 0 and "up-to-date" in out2
    digest = [w for w in out1.split() if w.startswith("digest=")]
    assert digest and digest == [w for w in out2.split() if w.startswith("digest=")]
    assert (tmp_path / "A" / "manifest.jsonl").read_bytes() == manifest


def test_usage_errors_exit_2(capsys):
    assert _run(capsys, "fly")[0] == 2
    assert _run(capsys)[0] == 2
    code, _, err = _run(capsys, "synth", "--spec", "x.json")
    assert code == 2 and err.strip().endswith("synth --spec needs --out")


def test_config_errors_exit_3(project, tmp_path, capsys):
    wd = tmp_path / "wd"
    code, _, err = _run(capsys, "evaluate", "--config", project, "--workdir", wd, "--set", "bogus=1")
    assert code == 3 and err.startswith("error: config: unknown config key")
    assert len(err.strip().splitlines()) == 1
    assert _run(capsys, "evaluate", "--config", project, "--workdir", wd, "--set", "tau=1.5")[0] == 3
    assert _run(capsys, "evaluate", "--config", tmp_path / "missing.json", "--workdir", wd)[0] == 3
    code, _, err = _run(capsys, "evaluate", "--config", project, "--workdir", wd)
    assert code == 3 and "manifest not found" in err
    code, _, err = _run(capsys, "train-teacher", "--workdir", wd)
    assert code == 3 and "source" in err


def test_set_overrides():
    cfg = apply_overrides(DEFAULTS, ["tau=0.8", "adam.learning_rate=0.01", "sweep.n_range=[6,8]", "freeze=last_conv_and_dense"])
    assert cfg["tau"] == 0.8 and cfg["adam"]["learning_rate"] == 0.01
    assert cfg["sweep"]["n_range"] == [6, 8] and cfg["freeze"] == "last_conv_and_dense"
    assert DEFAULTS["tau"] == 0.9
    with pytest.raises(ConfigError):
        apply_overrides(DEFAULTS, ["adam.nope.deeper=1"])
    with pytest.raises(ConfigError):
        apply_overrides(DEFAULTS, ["tau"])


def test_evaluate_without_teacher_names_ensemble(project, tmp_path, capsys):
    assert _run(capsys, "synth", "--config", project)[0] == 0
    code, out, err = _run(capsys, "evaluate", "--config", project, "--workdir", tmp_path / "wd")
    assert out.startswith("seed=0 seeds=0 config_digest=")
    assert code == 1
    assert err.startswith("error: pipeline: missing ensemble artifact: ")
    assert str(tmp_path / "wd" / "store" / "ensemble") in err
    assert _run(capsys, "finetune", "--config", project, "--workdir", tmp_path / "wd")[0] == 1


def _recipe(capsys, project, wd):
    for cmd in ("synth", "train-teacher", "pseudo-label", "finetune", "evaluate"):
        code, out, err = _run(capsys, cmd, "--config", project, "--workdir", wd)
        assert code == 0, (cmd, err)
    reports = [line.split(" ", 1)[1] for line in out.splitlines() if line.startswith("report ")]
    assert len(reports) == 2
    return out, reports


def test_recipe_is_byte_deterministic(project, tmp_path, capsys):
    from pathlib import Path
    assert _run(capsys, "synth", "--config", project)[0] == 0
    inputs = {p: p.read_bytes() for p in sorted((tmp_path / "data").rglob("*")) if p.is_file()}
    out1, r1 = _recipe(capsys, project, tmp_path / "wd1")
    out2, r2 = _recipe(capsys, project, tmp_path / "wd2")
    for a, b in zip(r1, r2):
        assert Path(a).read_bytes() == Path(b).read_bytes()
    doc = json.loads(Path(r1[0]).read_text())
    assert doc["config"]["seed"] == 0 and len(doc["config"]["config_digest"]) == 16
    assert {r["direction"] for r in doc["rows"]} == {"A→B", "B→A", "weighted"}
    assert doc["config"]["config_digest"] in r1[0]
    # rerunning evaluate over cached artifacts rewrites identical bytes
    before = Path(r1[0]).read_bytes()
    assert _run(capsys, "evaluate", "--config", project, "--workdir", tmp_path / "wd1")[0] == 0
    assert Path(r1[0]).read_bytes() == before
    # no stage touches its inputs
    assert {p: p.read_bytes() for p in inputs} == inputs
    assert sorted(p for p in (tmp_path / "data").rglob("*") if p.is_file()) == list(inputs)


def test_cost_command(tmp_path, capsys):
    code, out, _ = _run(capsys, "cost", "--workdir", tmp_path)
    assert code == 0
    assert out.strip().splitlines()[-1] == "1000 cams @ 30s × 292KB ≈ 35.0 GB/h"
    files = list((tmp_path / "cost").glob("*.json"))
    assert len(files) == 1
    doc = json.loads(files[0].read_text())
    assert doc["bandwidth"]["gb_per_hour"] == pytest.approx(35.0, rel=1e-3)
    assert _run(capsys, "cost", "--workdir", tmp_path, "--set", "cost.n_cameras=0")[0] == 3


def test_gradcheck_command(capsys):
    code, out, _ = _run(capsys, "gradcheck", "--arch", "student")
    assert code == 0 and "max_rel_error=" in out
