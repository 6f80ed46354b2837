import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tetvr.assets import Camera
from tetvr.tetmesh import TetMesh, build_regular_grid

settings.register_profile("repro", derandomize=True, deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repro")

REGULAR_TET = np.array([[1, 1, 1], [-1, 1, -1], [1, -1, -1], [-1, -1, 1]]) / np.sqrt(8)


@pytest.fixture
def unit_tet():
    return TetMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 2, 3]])


@pytest.fixture
def random_grid():
    """2x2x2 grid of the unit cube with random colors and extinctions."""
    rng = np.random.default_rng(7)
    mesh = build_regular_grid((2, 2, 2), ((0, 0, 0), (1, 1, 1)))
    mesh.colors = rng.random((mesh.n_vertices, 3))
    mesh.opacities = rng.uniform(0.2, 3.0, mesh.n_vertices)
    return mesh


@pytest.fixture
def cube_camera():
    return Camera.look_at([1.3, 1.1, 2.6], [0.5, 0.5, 0.5], [0, 1, 0], np.radians(40), 24, 20)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion (all of its parts must pass)."""
    mod = sys.modules.get("_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(mod.RESULTS):
        for name, passed, detail in mod.RESULTS[crit]:
            terminalreporter.write_line(f"  {crit} [{name}]: {'PASS' if passed else 'FAIL'} - "
                                        f"{detail}")
        parts = mod.RESULTS[crit]
        ok = all(p for _, p, _ in parts)
        failed = [name for name, p, _ in parts if not p]
        note = f" (failing: {', '.join(failed)})" if failed else ""
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}{note}")
