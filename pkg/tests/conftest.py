import warnings

import numpy as np
import pytest

from uodf.grid import GridSpec
from uodf.shapes import AnalyticSphere, MeshShape, close_plates, icosphere

warnings.filterwarnings("ignore", message=".*TBB.*")


@pytest.fixture(scope="session")
def sphere():
    return AnalyticSphere(0.9)


@pytest.fixture(scope="session")
def plates():
    return close_plates()


@pytest.fixture(scope="session")
def ico_shape():
    return MeshShape(icosphere(3, 0.9), name="ico")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def grid33():
    return GridSpec(33)


@pytest.fixture(scope="session")
def grid65():
    return GridSpec(65)


# --- acceptance reporting ------------------------------------------------------
# test_acceptance records one verdict per check; the summary prints one line
# per criterion (PASS only if every check of that criterion passed).

_FAILED_BEFORE = pytest.StashKey[int]()
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def record_criterion(number: int, check: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE.setdefault(number, []).append((check, bool(ok), detail))
    return bool(ok)


def _n_failed(n: int) -> int:
    return sum(not ok for _, ok, _ in ACCEPTANCE.get(n, []))


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        item.stash[_FAILED_BEFORE] = _n_failed(marker.args[0])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" or rep.passed:
        return
    # a failure that recorded no failed check (an exception) still counts
    n = marker.args[0]
    if _n_failed(n) == item.stash.get(_FAILED_BEFORE, 0):
        record_criterion(n, item.name, False, f"raised {call.excinfo.typename}" if call.excinfo else "")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[n]
        verdict = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        detail = "; ".join(f"{c}: {'ok' if ok else 'FAILED'} {d}".rstrip() for c, ok, d in checks)
        tr.write_line(f"criterion {n}: {verdict} | {detail}")
