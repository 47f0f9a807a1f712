import numpy as np
import pytest
import torch

# criterion number -> (passed, one-line detail), filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {n:2d}: {detail}")


class BenchmarkRuns:
    """Lazily computed cycle reports on the medium-shift and no-shift targets, cached per (row, seed)."""

    SEEDS = (0, 1, 2)

    def __init__(self):
        from promptalign.config import DataConfig, ExperimentConfig
        from promptalign.runner import Experiment
        from promptalign.synthdata import build_benchmark

        self.cfg = ExperimentConfig(name="acceptance", seeds=list(self.SEEDS), data=DataConfig(targets="medium"))
        self.exp = Experiment(self.cfg)
        # same source domain, so the per-seed pre-training is shared
        _, self.noshift = build_benchmark(DataConfig(targets="noshift").benchmark())
        self._cache = {}
        self._models = {}

    def row(self, label: str, seed: int, target: str = "medium"):
        from promptalign.runner import ABLATION_ROWS, row_config

        key = (label, seed, target)
        if key not in self._cache:
            flags = None if label == "baseline" else dict(ABLATION_ROWS)[label]
            streams = self.noshift if target == "noshift" else None
            res = self.exp.run_row(label, row_config(self.cfg.train, flags), seed, streams,
                                   on_cycle=lambda _report, models: self._models.__setitem__(key, models))
            self._cache[key] = res.reports[0]
        return self._cache[key]

    def models(self, label: str, seed: int, target: str = "medium"):
        """Cloud and edge models after the (single) cycle of a row."""
        self.row(label, seed, target)
        return self._models[(label, seed, target)]


@pytest.fixture(scope="session")
def benchmark_runs():
    return BenchmarkRuns()
