import contextlib
import io
import json
import time
from importlib import resources
from pathlib import Path

import pytest

from quenched.runner import run

SCENARIOS = Path(str(resources.files("quenched") / "scenarios"))

CRITERIA = {
    1: "W2 exactness",
    2: "quenched simulation oracle",
    3: "measure-derivative finite differences",
    4: "chain-rule residual",
    5: "verification and reachability frontier",
    6: "dynamic programming consistency",
    7: "budget closed form",
    8: "mean-constraint embedding",
    9: "determinism across worker counts",
}
_RESULTS = pytest.StashKey[dict]()


class CliRuns:
    """Runs CLI subcommands once per (scenario, subcommand, workers) and caches the outputs."""

    def __init__(self, root: Path):
        self.root = root
        self._cache = {}
        self.elapsed = {}

    def __call__(self, scenario: str, subcommand: str, workers: int = 1):
        key = (scenario, subcommand, workers)
        if key not in self._cache:
            out = self.root / f"{Path(scenario).stem}-{subcommand}-w{workers}"
            start = time.perf_counter()
            with contextlib.redirect_stdout(io.StringIO()):
                code = run(subcommand, SCENARIOS / scenario, out, workers=workers)
            self.elapsed[key] = time.perf_counter() - start
            raw = (out / f"{subcommand}.json").read_bytes()
            self._cache[key] = (code, json.loads(raw), out)
        return self._cache[key]


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    return CliRuns(tmp_path_factory.mktemp("cli"))


@pytest.fixture
def record(request):
    """``record(n, passed, detail)`` stores the outcome of acceptance criterion ``n``."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def _record(n: int, passed: bool, detail: str):
        results[n] = (bool(passed), detail)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        passed, detail = results.get(n, (False, "not run"))
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n}. {name}: {detail}")
