import numpy as np
import pytest
from hypothesis import settings

from moeedit.harness import ExperimentConfig
from moeedit.moe_core import random_model

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def small_model():
    return random_model(d_model=8, d_k=6, n_experts=4, top_k=2, n_layers=3, seed=7)


def small_config(**overrides) -> ExperimentConfig:
    base = dict(
        d_model=12, d_k=24, n_experts=4, top_k=2, n_layers=3, edit_layers=[0, 1],
        num_edits=12, batch_size=6, num_preservation=10, num_heldout=20,
        prompt_rank=6, tau=1e-3, lam=0.1, passes=6, bench_n=[4, 8], bench_d_k=8,
        bench_examples=8, bench_repetitions=1, sweep_passes=[1, 2, 4],
    )
    base.update(overrides)
    return ExperimentConfig(**base)


# criterion id -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(cid: str, name: str, ok: bool, detail: str) -> None:
    line = f"{cid:>3} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE[cid] = (ok, line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        terminalreporter.write_line(ACCEPTANCE[cid][1])
