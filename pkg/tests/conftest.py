import numpy as np
import pytest

from saliencystrike import data, victim


@pytest.fixture(scope="session")
def small_dataset():
    return data.build_dataset(per_class_train=20, per_class_test=4, n_points=128, seed=3)


@pytest.fixture(scope="session")
def small_pointnet(small_dataset):
    model = victim.build_model("pointnet_mini", small_dataset.num_classes, seed=1)
    model, _ = victim.train(model, small_dataset, victim.TrainConfig(epochs=30, seed=1))
    return model


@pytest.fixture(scope="session")
def small_dgcnn(small_dataset):
    model = victim.build_model("dgcnn_mini", small_dataset.num_classes, k_neighbors=8, seed=1)
    model, _ = victim.train(model, small_dataset, victim.TrainConfig(epochs=15, seed=1))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from tests.fixtures import ACCEPTANCE, CRITERIA
    ran = any(item for item in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
              if "test_acceptance" in getattr(item, "nodeid", ""))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        ok, detail = ACCEPTANCE.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {name}: {detail}")
