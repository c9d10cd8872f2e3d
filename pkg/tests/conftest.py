import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from primcascade import cloud as cl
from primcascade import merge as mg
from primcascade import metrics

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# every grouping produced by either solver during the session, with its column scopes
GROUPINGS = []
# acceptance outcomes: (criterion, passed, detail)
ACCEPTANCE = []
# p_coverage over an increasing epsilon grid for every evaluated cloud
EPS_GRID = (0.001, 0.005, 0.01, 0.02, 0.05, 0.1)
COVERAGE_SWEEPS = []


def _recording(fn):
    @functools.wraps(fn)
    def wrapper(intersection, column_scope=None, *args, **kwargs):
        out = fn(intersection, column_scope, *args, **kwargs)
        scope = intersection.column_scope if column_scope is None else column_scope
        if out.solved:
            GROUPINGS.append((out, np.asarray(scope).copy()))
        return out
    return wrapper


def _sweeping(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        pts, prims = kwargs.get("points"), kwargs.get("pred_primitives")
        if pts is not None and prims is not None:
            COVERAGE_SWEEPS.append((kwargs.get("cloud_id", ""),
                                    [metrics.p_coverage(pts, prims, e) for e in EPS_GRID]))
        return fn(*args, **kwargs)
    return wrapper


@pytest.fixture(autouse=True, scope="session")
def record_groupings():
    mp = pytest.MonkeyPatch()
    mp.setattr(mg, "greedy_merge", _recording(mg.greedy_merge))
    mp.setattr(mg, "exact_merge", _recording(mg.exact_merge))
    mp.setattr(metrics, "evaluate", _sweeping(metrics.evaluate))
    yield
    mp.undo()


def pytest_collection_modifyitems(items):
    # acceptance runs last so the audits see every grouping and evaluation of the session
    items.sort(key=lambda it: it.path.name == "test_acceptance.py")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda t: int(t[0][2:])):
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_scene():
    return cl.synthesize_scene(cl.SceneSpec(8, seed=11), 16384, 5e-3)


@pytest.fixture(scope="session")
def small_low(small_scene):
    return cl.fps_downsample(small_scene.cloud, 2048)
