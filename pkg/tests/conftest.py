import numpy as np
import pytest
import torch

from sting.config import ExperimentConfig


def tiny_config(**kw) -> ExperimentConfig:
    base = dict(
        data="synthetic",
        seed=0,
        out_dir="unused",
        synth_windows=24,
        synth_length=16,
        synth_features=3,
        window_length=16,
        stride=16,
        hidden_size=8,
        disc_hidden_size=8,
        n_heads=2,
        batch_size=8,
        pretrain_epochs=1,
        epochs=1,
        search_iterations=2,
        regressor_epochs=2,
        regressor_hidden=8,
        knn_k=3,
    )
    base.update(kw)
    return ExperimentConfig(**base).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tgen():
    return torch.Generator().manual_seed(1234)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report(capsys):
    """Print and remember one pass/fail line per acceptance criterion."""

    def emit(number: int, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
