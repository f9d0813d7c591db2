import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sfsynth.scene import DesiredField, Point3, Scene, build_experiment_scene  # noqa: E402


@pytest.fixture(scope="session")
def experiment_scene():
    return build_experiment_scene()


@pytest.fixture
def rng():
    return np.random.default_rng(20231014)


@pytest.fixture(scope="session")
def small_scene():
    """Six loudspeakers around a 3x3x1 grid; cheap enough for many solves."""
    angles = np.arange(6) * np.pi / 3
    ls = np.column_stack([1.2 * np.cos(angles), 1.2 * np.sin(angles), np.zeros(6)])
    g = np.linspace(-0.2, 0.2, 3)
    cp = np.array([[x, y, 0.0] for x in g for y in g])
    return Scene(ls, cp, DesiredField(Point3(2.5, 0.4, 0.0)), eval_points=[[0.0, 0.0, 0.0]])


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    number, title = mark.args
    detail = "; ".join(f"{v}" for k, v in item.user_properties if k == "detail")
    prev = _CRITERIA.get(number, (title, True, []))
    _CRITERIA[number] = (title, prev[1] and rep.passed, prev[2] + ([detail] if detail else []))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, details = _CRITERIA[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if details:
            line += "  [" + "; ".join(details) + "]"
        terminalreporter.write_line(line)
