from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("sp4d", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sp4d")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grid_mesh(nx: int, ny: int, labels=None):
    """Flat triangulated grid with (nx+1) x (ny+1) vertices."""
    from sp4d.tensorio import Mesh

    xs, ys = np.meshgrid(np.arange(nx + 1, dtype=float), np.arange(ny + 1, dtype=float), indexing="xy")
    V = np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], axis=1)
    idx = lambda i, j: j * (nx + 1) + i
    F = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1)
            F += [[a, b, d], [a, d, c]]
    parts = None if labels is None else np.array([labels(v[0], v[1]) for v in V])
    return Mesh(V, np.array(F), vertex_parts=parts)


# ---------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion, printed after the run

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n = mark.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed and not detail:
        detail = rep.longreprtext.strip().splitlines()[-1] if rep.longreprtext else "error"
    prev = _CRITERIA.get(n)
    if prev is None or prev[0] == "PASS":
        _CRITERIA[n] = ("PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL"), detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
