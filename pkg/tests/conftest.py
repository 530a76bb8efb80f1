import numpy as np
import pytest

from segfuse.geometry import Intrinsics, Pose


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random proper rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng: np.random.Generator, t_scale: float = 1.0) -> Pose:
    return Pose.from_rt(random_rotation(rng), rng.standard_normal(3) * t_scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_intrinsics():
    """64x48 camera with integer principal point for pixel-exact examples."""
    return Intrinsics(fx=10.0, fy=10.0, cx=32.0, cy=24.0, width=64, height=48)


_ACCEPTANCE_RESULTS = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _ACCEPTANCE_RESULTS[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE_RESULTS):
        outcome = _ACCEPTANCE_RESULTS[nodeid]
        name = nodeid.split("::")[-1]
        status = "PASS" if outcome == "passed" else outcome.upper()
        terminalreporter.write_line(f"{status:6s} {name}")
