import numpy as np
import pytest

from colorflow import synthetic
from colorflow.flow import FlowArch, train_flow
from colorflow.imagecore import PixelCloud, RgbImage


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def palette_images():
    rng = np.random.default_rng(2024)
    return [RgbImage(synthetic.palette_image(rng, 48, 48).data, f"p{i}") for i in range(4)]


@pytest.fixture(scope="session")
def small_flows(palette_images):
    """Quickly trained H=32 flows for the palette images (shared, read-only)."""
    return [
        train_flow(PixelCloud(img.pixels(), img.source_id), FlowArch(32), iters=2500, lr=2e-3, batch=1024, seed=i)
        for i, img in enumerate(palette_images)
    ]


def random_theta(rng, hidden, scale=1.0):
    return rng.normal(0.0, scale, 8 * hidden + 3)


_OUTCOMES: dict[int, str] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance" in report.nodeid and name.startswith("test_criterion_"):
        number = int(name.split("_")[2])
        if report.failed or (report.when == "call" and number not in _OUTCOMES):
            _OUTCOMES[number] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    from .verdicts import DETAILS

    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        detail = DETAILS.get(number, "did not complete")
        terminalreporter.write_line(f"criterion {number:2d} {_OUTCOMES[number]}: {detail}")
