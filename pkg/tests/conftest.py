import numpy as np
import pytest

from pointdg.config import TrainConfig
from pointdg.data import generate_synthetic_benchmark


@pytest.fixture(scope="session")
def tiny_bench(tmp_path_factory):
    """4 domains x 5 classes with 4 train / 2 test clouds each."""
    root = tmp_path_factory.mktemp("bench")
    generate_synthetic_benchmark(root, seed=11, train_per_class=4, test_per_class=2, force=True)
    return root


@pytest.fixture
def small_cfg():
    return TrainConfig(
        width=16,
        num_stages=2,
        state_size=4,
        groups=8,
        neighbors=4,
        num_points=64,
        epochs=2,
        warmup_epochs=1,
        batch_size=2,
        eval_batch_size=16,
        lr_init=1e-3,
        lr_final=1e-4,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE[number] = (ok, detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
