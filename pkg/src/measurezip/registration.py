"""Diffeomorphic matching by geodesic shooting, with optional compression of both shapes.

The deformation is parameterized by initial momenta ``p0`` on carrier points
``q0``. Hamilton's equations for ``H = 1/2 sum_ij k(q_i, q_j) <p_i, p_j>`` are
integrated with forward Euler on [0, 1]; template vertices follow the
resulting velocity field. The objective is

    E(p0) = h sum_t p_t^T K(q_t) p_t + lambda * ||P_c(mu_deformed) - target||^2

where ``P_c`` projects the deformed template measure onto the span of the
sections at its control atoms (carried along by the deformation). The
gradient is obtained by a hand-written reverse sweep through the data term,
the measure construction and every Euler step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .compress import compress, projection_weights
from .kernels import Gaussian, SumOfGaussians, dual_distance2, kernel_matrix
from .measures import DiracMeasure, measure_of_mesh
from .mesh import TriangleMesh, triangle_geometry
from .nystrom import ControlSet, SamplerConfig, sample_controls


class DivergenceError(FloatingPointError):
    def __init__(self, step, what="state"):
        super().__init__(f"non-finite {what} at Euler step {step}")
        self.step = step


@dataclass(frozen=True)
class DeformationConfig:
    kernel_V: object
    n_steps: int = 10
    lambda_match: float = 1.0
    max_iters: int = 100
    step_rule: str = "backtracking"
    eta: float | None = None  # fixed step size, or initial trial step for backtracking
    rel_tol: float = 1e-6

    def __post_init__(self):
        if not isinstance(self.kernel_V, (Gaussian, SumOfGaussians)):
            raise ValueError("deformation kernel must be Gaussian or a sum of Gaussians")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if not self.lambda_match >= 0:
            raise ValueError("lambda_match must be non-negative")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.step_rule not in ("backtracking", "fixed", "lbfgs"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if self.step_rule == "fixed" and not (self.eta and self.eta > 0):
            raise ValueError("the fixed step rule needs eta > 0")

    def to_dict(self):
        return {"kernel_V": self.kernel_V.to_config(), "n_steps": self.n_steps,
                "lambda_match": self.lambda_match, "max_iters": self.max_iters,
                "step_rule": self.step_rule, "eta": self.eta, "rel_tol": self.rel_tol}


@dataclass
class ShootingState:
    q: np.ndarray  # (n_steps + 1, n_q, d)
    p: np.ndarray
    energy: float

    @property
    def n_steps(self):
        return len(self.q) - 1


@dataclass
class MatchResult:
    p0: np.ndarray
    trajectory: list
    deformed_template: TriangleMesh
    hausdorff: float | None
    wall_time: float
    iteration_times: list
    stop_reason: str
    controls: ControlSet | None
    target_controls: ControlSet | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_iters(self):
        return len(self.iteration_times)

    def to_dict(self):
        return {
            "p0": self.p0.tolist(),
            "trajectory": self.trajectory,
            "hausdorff": self.hausdorff,
            "wall_time": self.wall_time,
            "iteration_times": self.iteration_times,
            "n_iters": self.n_iters,
            "stop_reason": self.stop_reason,
            "controls": None if self.controls is None else self.controls.to_dict(),
            "target_controls": None if self.target_controls is None else self.target_controls.to_dict(),
            "metadata": self.metadata,
        }


# ---------------------------------------------------------------------------
# forward integration

def _radial(kv, A, B):
    return kv.radial(cdist(A, B, "sqeuclidean"))


def _force(q, p, dk):
    """``g_i = sum_j 2 k'_ij (q_i - q_j) <p_i, p_j>``, the q-gradient of the Hamiltonian."""
    M = 2.0 * dk * (p @ p.T)
    return M.sum(axis=1)[:, None] * q - M @ q


def shoot(q0, p0, cfg):
    q0 = np.asarray(q0, dtype=np.float64)
    p0 = np.asarray(p0, dtype=np.float64)
    if q0.shape != p0.shape or q0.ndim != 2 or len(q0) < 1:
        raise ValueError(f"q0 and p0 must have equal shape (n, d), got {q0.shape} and {p0.shape}")
    N = cfg.n_steps
    h = 1.0 / N
    q = np.empty((N + 1,) + q0.shape)
    p = np.empty_like(q)
    q[0], p[0] = q0, p0
    energy = 0.0
    with np.errstate(over="ignore", invalid="ignore"):  # reported as DivergenceError instead
        for t in range(N):
            K, dk, _ = _radial(cfg.kernel_V, q[t], q[t])
            v = K @ p[t]
            energy += h * float(np.sum(p[t] * v))
            q[t + 1] = q[t] + h * v
            p[t + 1] = p[t] - h * _force(q[t], p[t], dk)
            if not (np.all(np.isfinite(q[t + 1])) and np.all(np.isfinite(p[t + 1]))):
                raise DivergenceError(t + 1, "momenta")
    return ShootingState(q, p, energy)


def flow_points(x0, state, cfg, return_path=False):
    """Carry ``x0`` along the velocity fields of ``state`` with the same Euler steps."""
    x = np.asarray(x0, dtype=np.float64)
    h = 1.0 / state.n_steps
    path = [x]
    for t in range(state.n_steps):
        K, _, _ = _radial(cfg.kernel_V, x, state.q[t])
        x = x + h * (K @ state.p[t])
        if not np.all(np.isfinite(x)):
            raise DivergenceError(t + 1, "positions")
        path.append(x)
    return np.stack(path) if return_path else x


# ---------------------------------------------------------------------------
# data term and its gradient with respect to atoms

def _data_term_grad(P, alpha, idx, target, spec):
    """Gradients of ``||mu - target||^2`` (or of the projected version) w.r.t. atom points and weights."""
    T, tau = target.points, target.weights
    gP = np.zeros_like(P)
    if idx is None:
        KXX = kernel_matrix(spec, P)
        KXT = spec.matrix(P, T)
        galpha = 2.0 * (KXX @ alpha - KXT @ tau)
        a1, b1 = spec.grad(P, P, alpha @ alpha.T)
        a2, _ = spec.grad(P, T, -2.0 * alpha @ tau.T)
        return a1 + b1 + a2, galpha
    C = P[idx]
    KCC = kernel_matrix(spec, C)
    KCX = spec.matrix(C, P)
    KCT = spec.matrix(C, T)
    beta, L = projection_weights(DiracMeasure(target.space, P, alpha), idx, spec)
    G = KCC @ beta - KCT @ tau
    Lam = cho_solve((L, True), G)
    galpha = 2.0 * KCX.T @ Lam
    gC_1, gX = spec.grad(C, P, 2.0 * Lam @ alpha.T)
    a, b = spec.grad(C, C, beta @ beta.T - 2.0 * Lam @ beta.T)
    gC_3, _ = spec.grad(C, T, -2.0 * beta @ tau.T)
    gP += gX
    np.add.at(gP, idx, gC_1 + a + b + gC_3)
    return gP, galpha


def _atoms_of_vertices(vertices, triangles, rep):
    v1, v2, v3 = (vertices[triangles[:, k]] for k in range(3))
    centroids = (v1 + v2 + v3) / 3.0
    nu = 0.5 * np.cross(v3 - v2, v2 - v1)
    if rep == "current":
        return centroids, nu, None
    area = np.linalg.norm(nu, axis=1)
    if np.any(area == 0):
        raise ValueError("varifold matching needs a template without zero-area triangles")
    normals = nu / area[:, None]
    return np.hstack([centroids, normals]), area[:, None], (normals, area)


def _vertex_grad(vertices, triangles, gP, galpha, rep, extra):
    """Pull atom gradients back to vertex gradients."""
    if rep == "current":
        gc, gnu = gP, galpha
    else:
        normals, area = extra
        gc, gn = gP[:, :3], gP[:, 3:]
        radial = np.einsum("ij,ij->i", gn, normals)
        gnu = galpha * normals + (gn - radial[:, None] * normals) / area[:, None]
    v1, v2, v3 = (vertices[triangles[:, k]] for k in range(3))
    e1, e2 = v3 - v2, v2 - v1
    ge1 = 0.5 * np.cross(e2, gnu)
    ge2 = 0.5 * np.cross(gnu, e1)
    gv = np.zeros_like(vertices)
    np.add.at(gv, triangles[:, 2], ge1 + gc / 3.0)
    np.add.at(gv, triangles[:, 1], -ge1 + ge2 + gc / 3.0)
    np.add.at(gv, triangles[:, 0], -ge2 + gc / 3.0)
    return gv


def _measure_from_atoms(P, alpha, rep):
    from .measures import BaseSpace
    space = BaseSpace.euclidean(3) if rep == "current" else BaseSpace.oriented(3)
    return DiracMeasure(space, P, alpha)


def data_term(vertices, template, target_hat, control_idx, spec, rep):
    """Squared distance between the (projected) deformed template measure and the target."""
    P, alpha, _ = _atoms_of_vertices(vertices, template.triangles, rep)
    mu = _measure_from_atoms(P, alpha, rep)
    if control_idx is not None:
        beta, _ = projection_weights(mu, control_idx, spec)
        mu = DiracMeasure(mu.space, P[control_idx], beta)
    return dual_distance2(mu, target_hat, spec)


# ---------------------------------------------------------------------------
# objective

def carriers_of(template, controls):
    centroids, _ = triangle_geometry(template)
    return centroids if controls is None else centroids[np.asarray(controls.indices)]


def objective(p0, template, target_hat, controls, spec, cfg, rep="varifold", details=False):
    """Objective value and its gradient with respect to ``p0``.

    ``controls`` indexes template triangles; its atoms both carry the momenta
    and define the projection. ``controls=None`` uses every triangle as a
    carrier and compares the full deformed measure with the target.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    idx = None if controls is None else np.asarray(controls.indices, dtype=np.int64)
    q0 = carriers_of(template, controls)
    tri = np.asarray(template.triangles)
    kv = cfg.kernel_V
    N = cfg.n_steps
    h = 1.0 / N
    lam = cfg.lambda_match

    state = shoot(q0, p0, cfg)
    xs = flow_points(template.vertices, state, cfg, return_path=True)
    D = data_term(xs[-1], template, target_hat, idx, spec, rep)
    total = state.energy + lam * D

    # reverse sweep
    if lam > 0:
        P, alpha, extra = _atoms_of_vertices(xs[-1], tri, rep)
        gP, galpha = _data_term_grad(P, alpha, idx, target_hat, spec)
        a_x = lam * _vertex_grad(xs[-1], tri, gP, galpha, rep, extra)
    else:
        a_x = np.zeros_like(xs[-1])
    a_q = np.zeros_like(q0)
    a_p = np.zeros_like(q0)
    for t in range(N - 1, -1, -1):
        q, p, x = state.q[t], state.p[t], xs[t]
        K, dk, d2k = _radial(kv, q, q)
        Kx, dkx, _ = _radial(kv, x, q)
        w = 2.0 * dk
        PP = p @ p.T
        v = K @ p
        g = _force(q, p, dk)

        # <a_q, K p>
        B = a_q @ p.T
        Y = w * (B + B.T)
        dpsi_q = Y.sum(axis=1)[:, None] * q - Y @ q
        # <a_p, g>
        S = np.einsum("ij,ij->i", a_p, q)[:, None] - a_p @ q.T
        SS = S + S.T
        Z = 4.0 * d2k * SS * PP
        wP = w * PP
        dF_q = Z.sum(axis=1)[:, None] * q - Z @ q + a_p * wP.sum(axis=1)[:, None] - wP @ a_p
        dF_p = (w * SS) @ p
        # <a_x, K(x, q) p>
        Yx = 2.0 * dkx * (a_x @ p.T)
        dphi_x = Yx.sum(axis=1)[:, None] * x - Yx @ q
        dphi_q = -(Yx.T @ x - Yx.sum(axis=0)[:, None] * q)
        dphi_p = Kx.T @ a_x

        a_q, a_p, a_x = (
            a_q + h * (dpsi_q - dF_q + dphi_q + 2.0 * g),
            a_p + h * (K @ a_q - dF_p + dphi_p + 2.0 * v),
            a_x + h * dphi_x,
        )
    if details:
        return total, a_p, {"energy": state.energy, "data": D, "total": total}
    return total, a_p


# ---------------------------------------------------------------------------
# optimization

def _prepare_target(target, rep, spec, m_target, sampler, sampler_cfg, seed):
    if isinstance(target, TriangleMesh):
        mu = measure_of_mesh(target, rep)
    else:
        mu = target
    if m_target is None or m_target >= mu.n:
        return mu, None
    cfg = SamplerConfig(**{**sampler_cfg.to_dict(), "m_exact": m_target})
    res = compress(mu, spec, sampler, cfg, seed)
    return res.compressed, res.controls


def _descent(fun, p, cfg, callback):
    """Gradient descent; backtracking uses Armijo c = 1e-4, shrink 0.5 and doubles after success."""
    f, g, parts = fun(p)
    traj = [dict(parts, iteration=0, step=0.0)]
    times = []
    step = cfg.eta
    stop = "max_iters"
    for it in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        gg = float(np.sum(g * g))
        if f == 0.0 or gg == 0.0:
            stop = "stationary"
            break
        if step is None:
            step = 0.1 / max(float(np.max(np.abs(g))), 1e-300)
        if cfg.step_rule == "fixed":
            p_new = p - cfg.eta * g
            f_new, g_new, parts = fun(p_new)
            used = cfg.eta
        else:
            while True:
                p_new = p - step * g
                try:
                    f_new, g_new, parts = fun(p_new)
                except DivergenceError:
                    f_new = np.inf
                if f_new <= f - 1e-4 * step * gg:
                    break
                step *= 0.5
                if step * np.sqrt(gg) < 1e-14 * (1.0 + np.sqrt(np.sum(p * p))):
                    f_new = None
                    break
            if f_new is None:
                stop = "line_search"
                times.append(time.perf_counter() - t0)
                break
            used = step
            step *= 2.0
        rel = abs(f - f_new) / max(abs(f), 1e-300)
        p, f, g = p_new, f_new, g_new
        times.append(time.perf_counter() - t0)
        traj.append(dict(parts, iteration=it, step=used))
        if callback is not None:
            callback(it, f)
        if rel < cfg.rel_tol:
            stop = "rel_tol"
            break
    return p, traj, times, stop


def _lbfgs(fun, p, cfg, callback):
    """scipy's L-BFGS-B (strong Wolfe line search) with the same stopping rules as descent."""
    shape = p.shape
    cache = {}

    def flat(x):
        f, g, parts = fun(x.reshape(shape))
        cache[x.tobytes()] = parts
        return f, g.ravel()

    f0, g0 = flat(p.ravel())
    traj = [dict(cache[p.ravel().tobytes()], iteration=0, step=0.0)]
    times = []
    if f0 == 0.0 or not np.any(g0):
        return p, traj, times, "stationary"
    state = {"t": time.perf_counter(), "f": f0, "stop": "max_iters"}

    def on_iter(intermediate_result):
        x = intermediate_result.x
        now = time.perf_counter()
        times.append(now - state["t"])
        state["t"] = now
        parts = cache.get(x.tobytes()) or fun(x.reshape(shape))[2]
        traj.append(dict(parts, iteration=len(times), step=float("nan")))
        f = parts["total"]
        rel = abs(state["f"] - f) / max(abs(state["f"]), 1e-300)
        state["f"] = f
        if callback is not None:
            callback(len(times), f)
        if rel < cfg.rel_tol:
            state["stop"] = "rel_tol"
            raise StopIteration

    res = minimize(flat, p.ravel(), jac=True, method="L-BFGS-B", callback=on_iter,
                   options={"maxiter": cfg.max_iters, "ftol": 0.0, "gtol": 0.0, "maxcor": 10})
    stop = state["stop"]
    if stop == "max_iters" and len(times) < cfg.max_iters:
        stop = "line_search"
    return res.x.reshape(shape), traj, times, stop


def compressed_match(template, target, cfg, spec, rep="varifold", m_template=None, m_target=None,
                     sampler="rls", sampler_cfg=None, seed=0, callback=None):
    """Match ``template`` onto ``target`` by optimizing the initial momenta.

    With ``m_template`` the template measure is compressed once to fix control
    triangles (which carry the momenta and define the per-iteration
    projection); with ``m_target`` the target is compressed up front.
    """
    t_start = time.perf_counter()
    sampler_cfg = sampler_cfg or SamplerConfig()
    target_hat, target_controls = _prepare_target(target, rep, spec, m_target, sampler, sampler_cfg, seed + 1)
    controls = None
    if m_template is not None and m_template < template.n_triangles:
        mu_t = measure_of_mesh(template, rep)
        scfg = SamplerConfig(**{**sampler_cfg.to_dict(), "m_exact": m_template})
        controls = sample_controls(spec, mu_t.points, sampler, scfg, seed)
    q0 = carriers_of(template, controls)

    def fun(p):
        return objective(p, template, target_hat, controls, spec, cfg, rep, details=True)

    run = _lbfgs if cfg.step_rule == "lbfgs" else _descent
    p, traj, times, stop = run(fun, np.zeros_like(q0), cfg, callback)

    state = shoot(q0, p, cfg)
    deformed = template.with_vertices(flow_points(template.vertices, state, cfg))
    hd = hausdorff_distance(deformed.vertices, target.vertices) if isinstance(target, TriangleMesh) else None
    meta = {"quadrature": "left_riemann", "parameterization": "geodesic_shooting", "rep": rep,
            "kernel_W": spec.to_config(), "deformation": cfg.to_dict(), "m_template": m_template,
            "m_target": m_target, "sampler": sampler, "seed": seed,
            "mean_iteration_time": float(np.mean(times)) if times else 0.0}
    return MatchResult(p, traj, deformed, hd, time.perf_counter() - t_start, times, stop, controls,
                       target_controls, meta)


# ---------------------------------------------------------------------------
# evaluation

def _directed(A, B):
    tree = cKDTree(B)
    k = min(2, len(B))
    _, nn = tree.query(A, k=k)
    nn = nn.reshape(len(A), k)
    # recompute candidate distances with one fixed formula so the result is exact
    d = np.sqrt(np.min(np.sum((A[:, None, :] - B[nn]) ** 2, axis=2), axis=1))
    return float(np.max(d))


def hausdorff_distance(A, B):
    """Symmetric Hausdorff distance between two point sets."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if len(A) == 0 or len(B) == 0:
        raise ValueError("Hausdorff distance of an empty set")
    return max(_directed(A, B), _directed(B, A))
