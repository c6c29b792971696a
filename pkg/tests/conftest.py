import pytest

from ropedistill.config import RunConfig, TrainConfig
from ropedistill.model import ModelConfig
from ropedistill.objective import ObjectiveMode
from ropedistill.tasks import TaskConfig


def tiny_run(**train_kw) -> RunConfig:
    """A run small enough for unit tests: 1 layer, 16 dims, 48-token sequences."""
    return RunConfig(
        model=ModelConfig(d_model=16, n_heads=2, n_layers=1, mlp_hidden=16, max_len=64),
        objective=ObjectiveMode("ours_reverse_kl", 1.0),
        train=TrainConfig(**{"steps": 6, "batch_size": 4, "lr": 1e-3, **train_kw}),
        task=TaskConfig(L=48, n_pairs=2, n_queries=1, copy_len=4, instances_per_bin=20),
    )


@pytest.fixture
def tiny():
    return tiny_run()


# One pass/fail line per acceptance criterion, printed after the run.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    def record(number, title: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}"
        ACCEPTANCE_LINES.append(line + (f": {detail}" if detail else ""))
        print(ACCEPTANCE_LINES[-1])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
