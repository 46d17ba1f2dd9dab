import mpmath
import numpy as np
import pytest
from conftest import random_mesh
from scipy.spatial.distance import cdist

from measurezip.compress import project_measure
from measurezip.kernels import Gaussian, Product, SphericalGaussian, SumOfGaussians, dual_distance2
from measurezip.measures import measure_of_mesh
from measurezip.mesh import icosphere
from measurezip.nystrom import ControlSet
from measurezip.registration import (DeformationConfig, DivergenceError, compressed_match, flow_points,
                                     hausdorff_distance, objective, shoot)

KV = Gaussian(0.8)
SPECS = {"current": Gaussian(0.6), "varifold": Product(Gaussian(0.6), SphericalGaussian(0.7))}


def cfg(**kw):
    base = {"kernel_V": KV, "n_steps": 10, "lambda_match": 1.0}
    base.update(kw)
    return DeformationConfig(**base)


def mp_euler(q0, p0, sigma, n_steps, x0=None):
    """Scalar-loop forward Euler in high precision for a Gaussian deformation kernel."""
    mpmath.mp.dps = 50
    s2 = mpmath.mpf(sigma) ** 2
    q = [[mpmath.mpf(float(v)) for v in row] for row in q0]
    p = [[mpmath.mpf(float(v)) for v in row] for row in p0]
    x = None if x0 is None else [[mpmath.mpf(float(v)) for v in row] for row in x0]
    h = mpmath.mpf(1) / n_steps
    n, d = len(q), len(q[0])

    def k(a, b):
        return mpmath.exp(-sum((a[c] - b[c]) ** 2 for c in range(d)) / (2 * s2))

    energy = mpmath.mpf(0)
    for _ in range(n_steps):
        v = [[sum(k(q[i], q[j]) * p[j][c] for j in range(n)) for c in range(d)] for i in range(n)]
        energy += h * sum(p[i][c] * v[i][c] for i in range(n) for c in range(d))
        # dH/dq_i = sum_j k'(r2) 2 (q_i - q_j) <p_i, p_j> with k' = -k / (2 s2)
        g = [[sum(-k(q[i], q[j]) / s2 * (q[i][c] - q[j][c]) * sum(p[i][e] * p[j][e] for e in range(d))
                  for j in range(n)) for c in range(d)] for i in range(n)]
        if x is not None:
            x = [[x[a][c] + h * sum(k(x[a], q[j]) * p[j][c] for j in range(n)) for c in range(d)]
                 for a in range(len(x))]
        q = [[q[i][c] + h * v[i][c] for c in range(d)] for i in range(n)]
        p = [[p[i][c] - h * g[i][c] for c in range(d)] for i in range(n)]
    to = lambda a: np.array([[float(v) for v in row] for row in a])  # noqa: E731
    return to(q), to(p), float(energy), (None if x is None else to(x))


# -- shooting ----------------------------------------------------------------

def test_zero_momentum_is_static(rng):
    q0 = rng.normal(size=(5, 3))
    st = shoot(q0, np.zeros_like(q0), cfg())
    assert st.energy == 0.0
    assert all(np.array_equal(q, q0) for q in st.q)
    x = rng.normal(size=(7, 3))
    np.testing.assert_array_equal(flow_points(x, st, cfg()), x)


def test_single_carrier_moves_straight():
    q0, p0 = np.array([[0.1, 0.2, 0.3]]), np.array([[1.0, -2.0, 0.5]])
    st = shoot(q0, p0, cfg(n_steps=7))
    assert all(np.array_equal(p, p0) for p in st.p)
    np.testing.assert_allclose(st.q[-1], q0 + p0, rtol=0, atol=1e-15)
    assert st.energy == pytest.approx(float(p0[0] @ p0[0]), rel=1e-14)


def test_two_carriers_match_high_precision_oracle(rng):
    q0, p0 = rng.normal(size=(2, 3)) * 0.5, rng.normal(size=(2, 3))
    st = shoot(q0, p0, cfg(n_steps=2))
    q, p, e, _ = mp_euler(q0, p0, KV.sigma, 2)
    np.testing.assert_allclose(st.q[-1], q, rtol=0, atol=1e-12)
    np.testing.assert_allclose(st.p[-1], p, rtol=0, atol=1e-12)
    assert st.energy == pytest.approx(e, rel=1e-12)


def test_flow_one_carrier_matches_oracle(rng):
    q0, p0, x0 = rng.normal(size=(1, 3)), rng.normal(size=(1, 3)), rng.normal(size=(5, 3))
    st = shoot(q0, p0, cfg(n_steps=4))
    _, _, _, x = mp_euler(q0, p0, KV.sigma, 4, x0)
    np.testing.assert_allclose(flow_points(x0, st, cfg(n_steps=4)), x, rtol=0, atol=1e-12)


def test_flow_reproduces_carriers_bitwise(rng):
    q0, p0 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    st = shoot(q0, p0, cfg())
    path = flow_points(q0, st, cfg(), return_path=True)
    assert np.array_equal(path, st.q)


def test_shoot_validation_and_divergence():
    with pytest.raises(ValueError):
        shoot(np.zeros((2, 3)), np.zeros((3, 3)), cfg())
    q0 = np.array([[0.0, 0, 0], [1e-3, 0, 0]])
    p0 = np.array([[1e200, 0, 0], [-1e200, 0, 0]])
    with pytest.raises(DivergenceError) as info:
        shoot(q0, p0, cfg())
    assert info.value.step >= 1


def test_config_validation():
    for bad in ({"n_steps": 0}, {"lambda_match": -1.0}, {"step_rule": "newton"}, {"step_rule": "fixed"},
                {"kernel_V": SphericalGaussian(1.0)}):
        with pytest.raises(ValueError):
            cfg(**bad)


# -- objective and gradient --------------------------------------------------

def fd_check(p0, f, h=1e-5):
    val, grad = f(p0)
    num = np.zeros_like(p0)
    for idx in np.ndindex(p0.shape):
        a, b = p0.copy(), p0.copy()
        a[idx] += h
        b[idx] -= h
        num[idx] = (f(a)[0] - f(b)[0]) / (2 * h)
    return np.max(np.abs(grad - num)) / np.max(np.abs(num))


def make_problem(seed, rep, m=20):
    r = np.random.default_rng(seed)
    template = random_mesh(r, subdivisions=1, noise=0.03)
    target = measure_of_mesh(random_mesh(r, subdivisions=1, noise=0.03), rep)
    controls = ControlSet(tuple(r.choice(template.n_triangles, size=m, replace=False)))
    p0 = 0.3 * r.normal(size=(m, 3))
    return template, target, controls, p0


@pytest.mark.parametrize("rep", ["current", "varifold"])
@pytest.mark.parametrize("kv", [Gaussian(0.7), SumOfGaussians((1.0, 0.5, 0.25, 0.125))])
def test_gradient_matches_finite_differences(rep, kv):
    template, target, controls, p0 = make_problem(3, rep)
    c = cfg(kernel_V=kv, lambda_match=5.0)
    err = fd_check(p0, lambda p: objective(p, template, target, controls, SPECS[rep], c, rep))
    assert err <= 1e-4, err


@pytest.mark.parametrize("rep", ["current", "varifold"])
def test_gradient_without_projection(rep):
    template, target, _, _ = make_problem(4, rep)
    p0 = 0.2 * np.random.default_rng(0).normal(size=(template.n_triangles, 3))
    err = fd_check(p0, lambda p: objective(p, template, target, None, SPECS[rep], cfg(n_steps=3), rep))
    assert err <= 1e-4, err


def test_lambda_zero_is_pure_energy():
    template, target, controls, p0 = make_problem(5, "current")
    c = cfg(lambda_match=0.0)
    val, _ = objective(p0, template, target, controls, SPECS["current"], c, "current")
    q0 = measure_of_mesh(template, "current").points[controls.array()]
    assert val == shoot(q0, p0, c).energy
    err = fd_check(p0, lambda p: (shoot(q0, p, c).energy, objective(p, template, target, controls,
                                                                      SPECS["current"], c, "current")[1]))
    assert err <= 1e-4


def test_value_at_zero_momentum_is_projected_data_term():
    template, target, controls, _ = make_problem(6, "varifold")
    spec = SPECS["varifold"]
    c = cfg(lambda_match=3.0)
    val, _ = objective(np.zeros((controls.m, 3)), template, target, controls, spec, c, "varifold")
    proj = project_measure(measure_of_mesh(template, "varifold"), controls, spec)
    assert val == 3.0 * dual_distance2(proj, target, spec)


def test_global_minimum_at_identity():
    template = icosphere(1)
    spec = SPECS["varifold"]
    target = measure_of_mesh(template, "varifold")
    val, grad = objective(np.zeros((template.n_triangles, 3)), template, target, None, spec, cfg(), "varifold")
    assert val == 0.0 and np.max(np.abs(grad)) <= 1e-8


# -- matching ----------------------------------------------------------------

def test_match_identical_shapes_stops_at_once():
    mesh = icosphere(1)
    res = compressed_match(mesh, mesh, cfg(max_iters=20), SPECS["current"], "current")
    assert res.n_iters == 0 and res.stop_reason == "stationary"
    assert res.trajectory[0]["total"] == 0.0 and res.hausdorff == 0.0


def test_backtracking_is_monotone():
    template = icosphere(1)
    target = template.with_vertices(template.vertices * np.array([1.0, 0.8, 1.2]))
    res = compressed_match(template, target, cfg(max_iters=15, lambda_match=50.0), SPECS["current"], "current",
                           m_template=40, m_target=40, seed=2)
    totals = [t["total"] for t in res.trajectory]
    assert len(totals) > 3
    assert all(b <= a for a, b in zip(totals, totals[1:]))
    assert res.controls.m == 40 and res.target_controls.m == 40
    assert res.metadata["quadrature"] == "left_riemann"
    assert res.hausdorff < hausdorff_distance(template.vertices, target.vertices)


@pytest.mark.parametrize("rule", ["fixed", "lbfgs"])
def test_other_step_rules_reduce_objective(rule):
    template = icosphere(1)
    target = template.with_vertices(template.vertices * np.array([1.0, 0.8, 1.2]))
    c = cfg(max_iters=10, lambda_match=50.0, step_rule=rule, eta=1e-5 if rule == "fixed" else None)
    res = compressed_match(template, target, c, SPECS["current"], "current", m_template=40)
    assert res.trajectory[-1]["total"] < res.trajectory[0]["total"]
    assert res.n_iters == len(res.trajectory) - 1
    assert set(res.to_dict()) >= {"p0", "trajectory", "hausdorff", "wall_time", "stop_reason"}


# -- Hausdorff ---------------------------------------------------------------

def test_hausdorff_examples(rng):
    A = rng.normal(size=(10, 3))
    assert hausdorff_distance(A, A) == 0.0
    assert hausdorff_distance([[0, 0, 0]], [[1, 0, 0]]) == 1.0
    with pytest.raises(ValueError):
        hausdorff_distance(np.zeros((0, 3)), A)


def test_hausdorff_equals_brute_force(rng):
    for _ in range(5):
        A, B = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
        D = np.sqrt(np.min(np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=2), axis=1))
        E = np.sqrt(np.min(np.sum((B[:, None, :] - A[None, :, :]) ** 2, axis=2), axis=1))
        assert hausdorff_distance(A, B) == max(D.max(), E.max())
        assert hausdorff_distance(A, B) == pytest.approx(max(cdist(A, B).min(1).max(), cdist(A, B).min(0).max()),
                                                         rel=1e-14)
