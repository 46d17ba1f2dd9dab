import numpy as np
import pytest

from measurezip.measures import BaseSpace, DiracMeasure
from measurezip.mesh import TriangleMesh, icosphere


def random_mesh(rng, subdivisions=1, noise=0.05):
    """Closed icosphere with jittered vertices (80 or 320 triangles)."""
    base = icosphere(subdivisions)
    v = base.vertices * rng.uniform(0.7, 1.3, size=3) + noise * rng.normal(size=base.vertices.shape)
    return TriangleMesh(v, base.triangles)


def random_current(rng, n, d=3):
    return DiracMeasure(BaseSpace.euclidean(d), rng.normal(size=(n, d)), rng.normal(size=(n, d)))


def random_varifold(rng, n):
    x = rng.normal(size=(n, 3))
    s = rng.normal(size=(n, 3))
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    return DiracMeasure(BaseSpace.oriented(3), np.hstack([x, s]), rng.uniform(0.1, 1.0, size=n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
