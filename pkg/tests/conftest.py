import json
import shutil

import pytest

from spikegrad.cli import EXPERIMENTS, main

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


class CliRuns:
    """Each experiment run twice with its shipped config into separate roots."""

    def __init__(self, root):
        self.root = root
        self._done = {}

    def run(self, experiment, seed=0):
        if (experiment, seed) not in self._done:
            dirs = []
            for rep in ("a", "b"):
                out = self.root / rep
                code = main([experiment, "--seed", str(seed), "--out", str(out)])
                assert code == 0, f"{experiment} exited with {code}"
                dirs.append(out / experiment / str(seed))
            self._done[(experiment, seed)] = dirs
        return self._done[(experiment, seed)]

    def report(self, experiment, seed=0):
        first, _ = self.run(experiment, seed)
        return json.loads((first / "report.json").read_text())["results"]


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    yield CliRuns(root)
    shutil.rmtree(root, ignore_errors=True)


@pytest.fixture(scope="session")
def all_experiments():
    return EXPERIMENTS
