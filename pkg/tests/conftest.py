import numpy as np
import pytest
from hypothesis import settings

from cellalign.geometry import RigidTransform
from cellalign.io import CellTable

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# Acceptance outcomes collected by test_acceptance.py, printed at session end.
ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    label = getattr(report, "acceptance_label", None)
    measured = ""
    for key, value in report.user_properties:
        if key == "acceptance":
            label = value
        elif key == "measured":
            measured = f" [{value}]"
    if label is None:
        return
    ACCEPTANCE[label] = ("PASS" if report.passed else "FAIL", measured)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][2:])):
        outcome, measured = ACCEPTANCE[label]
        terminalreporter.write_line(f"{outcome} {label}{measured}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_table(xy, features=None, labels=None, prefix="c"):
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    ids = tuple(f"{prefix}{i}" for i in range(len(xy)))
    return CellTable(ids, xy, features or {}, labels)


@pytest.fixture
def table_factory():
    return make_table


def random_rigid(rng, max_deg=30.0, max_t=50.0):
    return RigidTransform.from_degrees(rng.uniform(-max_deg, max_deg),
                                       rng.uniform(-max_t, max_t), rng.uniform(-max_t, max_t))
