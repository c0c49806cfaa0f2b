import numpy as np
import pytest

from vmarker import _backend
from vmarker.dataset import assemble_data_matrix, compute_symmetric_pairs
from vmarker.synth import SynthConfig, generate_synthetic_dataset

BACKENDS = ["python"] + (["compiled"] if _backend.HAVE_COMPILED else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic_dataset(SynthConfig(n_samples=30, m_target=120, noise_sigma=0.2), seed=3)


@pytest.fixture(scope="session")
def small_matrix(small_dataset):
    return assemble_data_matrix(small_dataset)


@pytest.fixture(scope="session")
def small_pairing(small_dataset):
    return compute_symmetric_pairs(small_dataset.template)


@pytest.fixture(scope="session")
def default_dataset():
    return generate_synthetic_dataset(SynthConfig(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary -------------------------------------------------------
# Tests tagged ``@pytest.mark.criterion(n, title)`` are grouped by criterion and
# reported as one PASS/FAIL line each at the end of the run. Details recorded
# with ``record_property("detail", ...)`` are appended to the line.

_criteria = {}
_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _criteria[item.nodeid] = mark.args


def pytest_runtest_logreport(report):
    if report.nodeid not in _criteria:
        return
    if report.when == "call" or report.failed or report.skipped:
        ok, details = _outcomes.get(report.nodeid, (True, []))
        details = details + [v for k, v in report.user_properties if k == "detail"]
        _outcomes[report.nodeid] = (ok and report.passed, details)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    titles, passed, notes = {}, {}, {}
    for nodeid, (ok, details) in _outcomes.items():
        n, title = _criteria[nodeid]
        titles[n] = title
        passed[n] = passed.get(n, True) and ok
        notes.setdefault(n, []).extend(details)
    terminalreporter.section("acceptance criteria")
    for n in sorted(titles):
        line = f"criterion {n:2d}: {'PASS' if passed[n] else 'FAIL'}  {titles[n]}"
        if notes[n]:
            line += "  [" + "; ".join(notes[n]) + "]"
        terminalreporter.write_line(line)
