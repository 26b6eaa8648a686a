"""Shared fixtures: small datasets, session-cached training runs, acceptance summary lines."""
from __future__ import annotations

import time

import numpy as np
import pytest

from concat_lab import pipeline as P
from concat_lab.config import RunConfig, apply_overrides, config_from_dict
from concat_lab.datagen import DatasetSpec, generate_dataset

ACCEPTANCE_SEEDS = (0, 1, 2)

# criterion id -> (passed, detail); filled by test_acceptance, printed at the end of the session
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    def record(name: str, passed: bool, detail: str = "") -> None:
        ACCEPTANCE_RESULTS[name] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda n: (int(n.split()[0].rstrip("ab")), n)):
        passed, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"criterion {name}: {'PASS' if passed else 'FAIL'}  {detail}")


# ----------------------------------------------------------------------------
# small data

TINY_SPEC = dict(n_seen=3, n_unseen=2, d_vision=8, c_semantic=6, k_queries=4, grid=(8, 8),
                 n_train=6, n_test=4, segments_per_image=(1, 2))


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(DatasetSpec(**TINY_SPEC, seed=3))


def tiny_config(**training) -> RunConfig:
    d = RunConfig().to_dict()
    d["dataset"].update(TINY_SPEC)
    d["training"].update(dict(stage1_epochs=2, stage2_epochs=2, stage3_epochs=1, batch_size=2,
                              fidelity_samples=10), **training)
    return config_from_dict(d)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ----------------------------------------------------------------------------
# acceptance-scale runs, computed once per session

class RunCache:
    """Default-spec pipeline runs keyed by (seed, overrides); stage 1 is shared per seed."""

    def __init__(self):
        self._stage1: dict[int, tuple] = {}
        self._runs: dict[tuple, tuple[P.PipelineResult, float]] = {}
        self._datasets: dict[int, object] = {}

    def dataset(self, seed: int):
        if seed not in self._datasets:
            self._datasets[seed] = generate_dataset(RunConfig().with_seed(seed).dataset)
        return self._datasets[seed]

    def stage1(self, seed: int):
        if seed not in self._stage1:
            t0 = time.perf_counter()
            proj, log = P.train_stage1(self.dataset(seed), RunConfig().with_seed(seed))
            self._stage1[seed] = ({k: v.copy() for k, v in proj.state_dict().items()}, log,
                                  time.perf_counter() - t0)
        return self._stage1[seed]

    def run(self, seed: int, overrides: tuple[str, ...] = ()) -> tuple[P.PipelineResult, float]:
        """Full transductive pipeline; returns (result, wall seconds including stage 1)."""
        key = (seed, overrides)
        if key not in self._runs:
            config = apply_overrides(RunConfig().with_seed(seed), list(overrides))
            state, log, t1 = self.stage1(seed)
            proj = P.build_projector(config)
            proj.load_state_dict(state)
            t0 = time.perf_counter()
            result = P.run_pipeline(self.dataset(seed), config, stage1=proj, stage1_log=log)
            self._runs[key] = (result, t1 + time.perf_counter() - t0)
        return self._runs[key]


@pytest.fixture(scope="session")
def runs() -> RunCache:
    return RunCache()
