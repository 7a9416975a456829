import numpy as np
import pytest

from papmask.core import LandmarkSet, Point2, Raster


@pytest.fixture
def gradient_image():
    """A 40x30 RGB image whose pixels encode their own coordinates."""
    yy, xx = np.mgrid[0:30, 0:40]
    data = np.stack([xx * 6, yy * 8, (xx + yy) % 256], axis=-1).astype(np.uint8)
    return Raster(data)


@pytest.fixture
def nose_landmarks():
    return LandmarkSet({"nose_left": Point2(10.0, 12.0), "nose_right": Point2(25.5, 13.0)}, "nose")


def write_png(path, raster):
    raster.save(path)
    return path


# -- acceptance verdict lines -----------------------------------------------------

_verdicts: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    previous = _verdicts.get(n, ("PASS", title))[0]
    if rep.failed:
        _verdicts[n] = ("FAIL", title)
    elif rep.skipped and previous != "FAIL":
        _verdicts[n] = ("SKIP", title)
    elif rep.when == "call" and n not in _verdicts:
        _verdicts[n] = ("PASS", title)

def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        verdict, title = _verdicts[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title}")
