import contextlib
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from logocap.core import NUM_KEYPOINTS, GtInstance, PoseSet

# property tests are seeded so the suite is reproducible run to run
settings.register_profile("repo", derandomize=True, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

ACCEPTANCE = {}


@contextlib.contextmanager
def criterion(name):
    """Record a PASS/FAIL line for an acceptance criterion."""
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        ACCEPTANCE[name] = ("FAIL", f"{info['detail']} {type(exc).__name__}: {exc}".strip())
        print(f"{name} FAIL {ACCEPTANCE[name][1]}")
        raise
    ACCEPTANCE[name] = ("PASS", info["detail"])
    print(f"{name} PASS {info['detail']}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {status} {detail}")


def make_gt(xy, area=10000.0, gid=0, visible=None):
    xy = np.asarray(xy, dtype=np.float64).reshape(NUM_KEYPOINTS, 2)
    vis = np.full(NUM_KEYPOINTS, 2.0) if visible is None else np.where(visible, 2.0, 0.0)
    return GtInstance(np.column_stack([xy, vis]), area, gid)


def make_poses(xy, center_score=0.9):
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, NUM_KEYPOINTS, 2)
    n = xy.shape[0]
    kp = np.concatenate([xy, np.full((n, NUM_KEYPOINTS, 1), center_score)], axis=-1)
    centers = np.column_stack([xy.mean(axis=1), np.full(n, center_score)])
    return PoseSet(centers, kp)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
