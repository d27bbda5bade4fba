import warnings

import numpy as np
import pytest

from ccl_fsod import knowledge, toymodel, trainer


@pytest.fixture(scope="session")
def small_dataset():
    cfg = toymodel.DatasetConfig(base_per_class=12, test_per_class=6, seed=3)
    return toymodel.generate_dataset(cfg)


@pytest.fixture(scope="session")
def small_params(small_dataset):
    cfg = trainer.TrainConfig(base_epochs=3, seed_init=5)
    return trainer.train_base(cfg, small_dataset)


@pytest.fixture(scope="session")
def small_zeta(small_dataset):
    return knowledge.build_knowledge_matrix(
        2, small_dataset.C, labels=small_dataset.attribute_labels(),
        category_names=small_dataset.category_names,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_empty_loss_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="no proposal has a prototype")
        warnings.filterwarnings("ignore", message="no prototypes available")
        yield


# -- acceptance report ------------------------------------------------------------

ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion."""

    def _report(n, ok, detail):
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
