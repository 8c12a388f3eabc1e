"""Shared fixtures: the acceptance scoreboard and the cached mini pipeline."""

import json
import time

import pytest

from tamnas import cli

ACCEPTANCE = {}  # criterion number -> (passed, detail)


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if passed else 'FAIL'}  {detail}")


class PipelineRuns:
    """Runs CLI stages on the mini preset once per (tag, seed, command)."""

    def __init__(self, base):
        self.base = base
        self.done = {}  # (tag, seed, command) -> wall seconds

    def root(self, tag: str, seed: int):
        return self.base / f"{tag}-s{seed}" / "tamnas"

    def run(self, tag: str, seed: int, *commands) -> float:
        """Run the stages not yet run; returns the total wall time of the requested stages."""
        total = 0.0
        for c in commands:
            key = (tag, seed, c)
            if key not in self.done:
                start = time.perf_counter()
                code = cli.main([c, "--preset", "mini", "--seed", str(seed), "--out", str(self.base / f"{tag}-s{seed}")])
                self.done[key] = time.perf_counter() - start
                assert code == cli.EXIT_OK, f"`tamnas {c}` (seed {seed}, {tag}) exited {code}"
            total += self.done[key]
        return total

    def json(self, tag: str, seed: int, sub: str, name: str):
        return json.loads((self.root(tag, seed) / sub / name).read_text())

    def csv(self, tag: str, seed: int, sub: str, name: str) -> list:
        return cli.read_csv(self.root(tag, seed) / sub / name)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    return PipelineRuns(tmp_path_factory.mktemp("pipeline"))
