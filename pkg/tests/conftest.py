import numpy as np
import pytest
from hypothesis import settings

from fcn_instruct.atlas import default_partition
from fcn_instruct.cohort import AttributeDef, CohortSpec, Effect
from fcn_instruct.pipeline import ExperimentConfig, ModelDims, prepare
from fcn_instruct.training import TrainConfig

settings.register_profile("default", deadline=None)
settings.load_profile("default")


def small_config(n_subjects=40, delta=0.4, seed=0, counts1=None, counts2=None, test=None, d_model=16):
    """A cohort of small 20-ROI subjects with a gender and a continuous attribute."""
    part = default_partition(20, 3, assigned=16)
    attrs = (
        AttributeDef("gender", "categorical", labels=("male", "female"), effect=Effect((1, 2), delta, "female")),
        AttributeDef("fiq", "continuous", min=40, max=160),
    )
    spec = CohortSpec(n_subjects, 60, part, attrs, seed=seed)
    return ExperimentConfig(
        spec, window=40, step=10, tau=0.5,
        dims=ModelDims(d_model=d_model, n_layers=2, n_heads=2, gcn_hidden=16, proj_hidden=16, max_len=96),
        stage1_counts=counts1 or {"predictive": 200, "judgment": 200, "comparative": 100},
        stage2_counts=counts2 or {"predictive": 60, "judgment": 60, "comparative": 60},
        test_counts=test or {"predictive": 30, "judgment": 30, "comparative": 30},
        pretrain=TrainConfig(stage="pretrain", learning_rate=1e-3, epochs=1, batch_size=16),
        stage1=TrainConfig(stage="one", learning_rate=1e-3, batch_size=16),
        stage2=TrainConfig(stage="two", learning_rate=1e-5, batch_size=16),
        seed=seed,
    )


@pytest.fixture(scope="session")
def small_experiment():
    return prepare(small_config())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
