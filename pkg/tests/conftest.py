import numpy as np
import pytest

from mpcguide.data import circle_mixture
from mpcguide.models import TrainConfig, train_classifier, train_eps
from mpcguide.schedule import make_schedule


@pytest.fixture(scope="session")
def sched():
    return make_schedule("linear-beta", 100)


@pytest.fixture(scope="session")
def circle_data():
    return circle_mixture(4).with_samples(4000, np.random.default_rng(0))


@pytest.fixture(scope="session")
def circle_oracle(circle_data, sched):
    return circle_data.analytic(sched)


@pytest.fixture(scope="session")
def small_cfg():
    return TrainConfig(steps=300, hidden=32, batch_size=128, log_every=50)


@pytest.fixture(scope="session")
def small_eps(circle_data, sched, small_cfg):
    return train_eps(circle_data, sched, small_cfg)


@pytest.fixture(scope="session")
def small_classifier(circle_data, sched, small_cfg):
    return train_classifier(circle_data, sched, small_cfg)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
