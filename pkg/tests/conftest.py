import json
import os
import time
from pathlib import Path

import pytest

from pkdistill.data import benchmark_spec, parse_manifest, synth_generate
from pkdistill.harness import ExperimentConfig, run_main_experiment
from pkdistill.store import ArtifactStore

# one line per acceptance criterion, echoed in the terminal summary
VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict(capsys):
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS[number] = line
        with capsys.disabled():
            print(f"\n{line}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])


# ---------------------------------------------------------------- synthetic benchmark, shared by slow tests

@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Data and artifact store; set PKDISTILL_ACCEPTANCE_DIR to keep them between sessions."""
    env = os.environ.get("PKDISTILL_ACCEPTANCE_DIR")
    root = Path(env) if env else tmp_path_factory.mktemp("acceptance")
    root.mkdir(parents=True, exist_ok=True)
    return root


@pytest.fixture(scope="session")
def benchmark(workspace):
    out = {}
    for name in ("A", "B"):
        spec = benchmark_spec(name)
        d = workspace / "data" / name
        meta = d / "synth.json"
        if meta.exists() and json.loads(meta.read_text()).get("digest") == spec.digest():
            out[name] = parse_manifest(d / "manifest.jsonl")
        else:
            out[name] = synth_generate(spec, d)
    return out


@pytest.fixture(scope="session")
def store(workspace):
    return ArtifactStore(workspace / "store")


@pytest.fixture(scope="session")
def main_report(benchmark, store):
    """n=7, tau=0.9, five seeds, both directions, with the true-label oracle."""
    cfg = ExperimentConfig(benchmark["A"], benchmark["B"], n_days=7, tau=0.9, seeds=(0, 1, 2, 3, 4), oracle=True)
    t = time.time()
    report = run_main_experiment(cfg, store)
    return report, time.time() - t
