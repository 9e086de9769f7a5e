import dataclasses
import functools
import time

import pytest

from kdrank.data import generate_dataset
from kdrank.distill import RunConfig, distill_student, train_teacher

STUDENT_SEEDS = (1, 2, 3, 4, 5)

# criterion number -> title, outcome of each test, measured details
_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "results": [], "details": []})
    if report.when == "call" or report.failed:
        entry["results"].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["results"] and all(entry["results"]) else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {entry['title']}")
        for line in entry["details"]:
            terminalreporter.write_line(f"              {line}")


@pytest.fixture
def detail(request):
    """Attach a measured value to the acceptance summary line of this test's criterion."""
    marker = request.node.get_closest_marker("criterion")

    def record(text: str) -> None:
        number, title = marker.args
        _criteria.setdefault(number, {"title": title, "results": [], "details": []})["details"].append(text)

    return record


# --- shared desk-scale runs ---------------------------------------------------
#
# Logging every 10 epochs instead of every epoch: evaluation never touches the
# training RNG or parameters, so trajectories are identical and runs are faster.


@pytest.fixture(scope="session")
def desk_cfg():
    return dataclasses.replace(RunConfig(), eval_every=10)


@pytest.fixture(scope="session")
def desk_data(desk_cfg):
    return generate_dataset(desk_cfg.dataset)


@dataclasses.dataclass
class Timed:
    value: object
    seconds: float


@pytest.fixture(scope="session")
def desk_teacher(desk_cfg, desk_data):
    """``Timed((model, rows), seconds)`` for the default teacher."""
    start = time.perf_counter()
    result = train_teacher(desk_cfg, desk_data)
    return Timed(result, time.perf_counter() - start)


def desk_variant(cfg, seed, gamma=None, normalize=None):
    weights = cfg.weights if gamma is None else dataclasses.replace(cfg.weights, gamma=float(gamma))
    ranking = cfg.ranking if normalize is None else dataclasses.replace(cfg.ranking, normalize_inputs=normalize)
    sgd = dataclasses.replace(cfg.student_sgd, seed=seed)
    return dataclasses.replace(cfg, weights=weights, ranking=ranking, student_sgd=sgd)


@pytest.fixture(scope="session")
def desk_run(desk_cfg, desk_data, desk_teacher):
    """Cached ``(seed, gamma, normalize) -> Timed(rows, seconds)`` for desk-scale students."""
    teacher = desk_teacher.value[0]

    @functools.cache
    def run(seed, gamma=None, normalize=None):
        start = time.perf_counter()
        rows = distill_student(desk_variant(desk_cfg, seed, gamma, normalize), teacher, desk_data)[1]
        return Timed(rows, time.perf_counter() - start)

    return run


def final_test(rows):
    return [r for r in rows if r.split == "test"][-1]
