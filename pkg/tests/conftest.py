import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spatial_ldf.data import Dataset

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


def make_dataset(X, y=None, sensors=None, days=None, domain="target", aux=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    return Dataset(
        samples=X,
        labels=np.zeros(n) if y is None else y,
        sensor_ids=np.arange(n) if sensors is None else sensors,
        day_index=np.zeros(n, dtype=int) if days is None else days,
        domain_tag=domain,
        aux_labels=aux,
        coordinate_indices=(0, 1) if X.shape[1] > 1 else (0, 0),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def record(criterion: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}")
    print(ACCEPTANCE[-1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
