"""Compression of Dirac measures onto control points by orthogonal projection.

The projection of ``mu = sum_i delta_{x_i} alpha_i`` onto the span of the
kernel sections at control points ``c`` has weights ``beta = K_CC^{-1} Y``
with ``Y = K_CX alpha``. Its squared error is bounded by a multiple of the
Nyström trace error ``tr(K_XX - Q_XX)``, which drives size selection.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve

from .kernels import (FactorizationError, _check_space, cholesky_jitter, dual_distance2, dual_norm2,
                      kernel_apply, kernel_matrix)
from .measures import DiracMeasure
from .nystrom import (DENSE_CAP, ControlSet, SamplerConfig, make_rng, mcmc_kdpp_sample,
                      nystrom_trace_error, sample_controls, sampler_order, trace_error_from_factor)

CURVE_COLUMNS = ("sampler", "m", "seed", "squared_error", "trace_error", "wall_time_s")


@dataclass
class CompressionResult:
    compressed: DiracMeasure
    controls: ControlSet
    trace_error: float
    squared_error: float | None = None
    wall_time: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def m(self):
        return self.controls.m

    def to_dict(self):
        return {
            "compressed": self.compressed.to_dict(),
            "controls": self.controls.to_dict(),
            "trace_error": self.trace_error,
            "squared_error": self.squared_error,
            "wall_time": self.wall_time,
            "metadata": self.metadata,
        }


def _indices(controls, n):
    if isinstance(controls, ControlSet):
        controls.check(n)
        return controls.array()
    idx = np.asarray(controls, dtype=np.int64)
    ControlSet(tuple(idx)).check(n)
    return idx


def _near_duplicates(K, limit=5):
    d = np.sqrt(np.diag(K))
    cos = K / np.outer(d, d)
    i, j = np.nonzero(np.triu(cos >= 1 - 1e-8, 1))
    return list(zip(i.tolist(), j.tolist()))[:limit]


def factor_controls(spec, C):
    """Jittered Cholesky of K_CC; failure names near-duplicate control positions."""
    K = kernel_matrix(spec, C)
    try:
        return cholesky_jitter(K)
    except FactorizationError as exc:
        pairs = _near_duplicates(K)
        raise FactorizationError(f"{exc}; near-duplicate control positions (in control order): {pairs}") from None


def projection_weights(mu, idx, spec):
    """Weights ``beta`` of the projection onto controls ``idx`` and the Cholesky factor used."""
    C = mu.points[idx]
    factor, _ = factor_controls(spec, C)
    # Y = K_CX alpha, streamed over source atoms
    Y = kernel_apply(spec, C, mu.points, mu.weights)
    return cho_solve(factor, Y), np.tril(factor[0])


def project_measure(mu, controls, spec):
    """Orthogonal projection of ``mu`` onto the span of the sections at ``controls``."""
    _check_space(spec, mu.space)
    idx = _indices(controls, mu.n)
    beta, _ = projection_weights(mu, idx, spec)
    return DiracMeasure(mu.space, mu.points[idx], beta)


def krr_data(mu, spec, mu_reg, cap=DENSE_CAP):
    """``(K_XX, y~)`` with ``y~ = (K_XX + mu_reg I) alpha``."""
    if mu.n > cap:
        raise ValueError(f"{mu.n} atoms exceeds the dense cap of {cap}")
    K = kernel_matrix(spec, mu.points)
    return K, K @ mu.weights + mu_reg * mu.weights


def nystrom_krr_weights(mu, controls, spec, mu_reg, cap=DENSE_CAP):
    """Nyström kernel-ridge weights: ``(K_CX K_XC + mu K_CC) beta = K_CX y~``.

    K_CC carries the usual Cholesky jitter.
    """
    if not mu_reg > 0:
        raise ValueError("mu_reg must be positive")
    _check_space(spec, mu.space)
    idx = _indices(controls, mu.n)
    K, ytil = krr_data(mu, spec, mu_reg, cap)
    (L, _), _ = factor_controls(spec, mu.points[idx])
    # the normal equations are those of min ||K_XC b - y~||^2 + mu ||L^T b||^2;
    # least squares on the stacked system avoids squaring the condition number
    A = np.vstack([K[:, idx], np.sqrt(mu_reg) * np.tril(L).T])
    rhs = np.vstack([ytil, np.zeros((len(idx), ytil.shape[1]))])
    beta = np.linalg.lstsq(A, rhs, rcond=None)[0]
    return DiracMeasure(mu.space, mu.points[idx], beta)


def krr_bound_constant(mu, spec, mu_reg, cap=DENSE_CAP):
    """``C = (2 w / mu^2) ||y~||_F^2`` where w is the weight width."""
    _, ytil = krr_data(mu, spec, mu_reg, cap)
    return 2.0 * mu.width / mu_reg ** 2 * float(np.sum(ytil * ytil))


def compression_error2(mu, result, spec, mu_norm2=None):
    return dual_distance2(mu, result, spec, mu_norm2=mu_norm2)


def compress(mu, spec, sampler="rls", cfg=None, seed=0, controls=None, evaluate=False):
    """Sample controls (unless given), project and report the trace error."""
    t0 = time.perf_counter()
    _check_space(spec, mu.space)
    cfg = cfg or SamplerConfig()
    if controls is None:
        controls = sample_controls(spec, mu.points, sampler, cfg, seed)
    idx = _indices(controls, mu.n)
    beta, L = projection_weights(mu, idx, spec)
    out = DiracMeasure(mu.space, mu.points[idx], beta)
    trace = trace_error_from_factor(spec, mu.points, mu.points[idx], L)
    err = compression_error2(mu, out, spec) if evaluate else None
    return CompressionResult(out, controls, trace, err, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# size selection

class _PartialCholesky:
    """Pivoted partial Cholesky along a fixed order; tracks the residual diagonal.

    The residual sum after k pivots is ``tr(K - Q)`` for the first k controls
    (without jitter). Residuals only shrink, so the trajectory is monotone.
    """

    def __init__(self, spec, P):
        self.spec, self.P = spec, P
        self.resid = spec.diag(P).astype(np.float64).copy()
        self.cols = []
        self.scale = float(np.mean(self.resid))

    def add(self, c):
        col = self.spec.matrix(self.P, self.P[c][None, :])[:, 0]
        for f in self.cols:
            col -= f * f[c]
        piv = self.resid[c]
        if piv <= 1e-14 * self.scale:
            f = np.zeros_like(col)
        else:
            f = col / np.sqrt(piv)
        self.cols.append(f)
        self.resid = np.maximum(self.resid - f * f, 0.0)
        self.resid[c] = 0.0

    def trace(self):
        return float(np.sum(self.resid))


def rank_for_tau(spec, P, tau, seed, sample_size=1024):
    """Smallest S whose estimated eigenvalue tail beyond S is at most ``tau``."""
    n = len(P)
    s = min(n, sample_size)
    rng = make_rng(seed, 4)
    idx = np.sort(rng.choice(n, size=s, replace=False)) if s < n else np.arange(n)
    e = np.clip(np.linalg.eigvalsh(kernel_matrix(spec, P[idx]))[::-1], 0.0, None) * (n / s)
    tails = np.concatenate([np.cumsum(e[::-1])[::-1], [0.0]])
    return int(max(1, min(np.flatnonzero(tails <= tau)[0], s)))


def _next_m(m, growth, n):
    return min(n, m + 1 if growth == "add_one" else 2 * m)


def choose_m_trace(mu, spec, tau, sampler="rls", cfg=None, seed=0, growth="double", nested=True):
    """Grow the control set until the Nyström trace error is at most ``tau`` or m = n.

    Nested mode draws one priority order and grows prefixes of it; otherwise a
    fresh size-m draw is made at every size. The (m, trace) trajectory, the
    growth policy and the mode are stored in the returned ``params``.
    """
    _check_space(spec, mu.space)
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if growth not in ("add_one", "double"):
        raise ValueError(f"unknown growth policy {growth!r}")
    if sampler == "kdpp" and nested:
        raise ValueError("the k-DPP chain does not produce nested draws; use nested=False")
    cfg = cfg or SamplerConfig()
    P = mu.points
    n = len(P)
    traj = []
    meta = {"tau": tau, "growth": growth, "nested": nested}

    if nested:
        if cfg.S is None and cfg.lambda_reg == 0 and sampler in ("rls", "exact_rls"):
            cfg = replace(cfg, S=rank_for_tau(spec, P, tau, seed, cfg.base_case), m_exact=None)
        order, info = sampler_order(spec, P, sampler, cfg, seed)
        meta.update(info)
        pc = _PartialCholesky(spec, P)
        m = 0
        while True:
            target = 1 if m == 0 else _next_m(m, growth, n)
            while m < target:
                pc.add(order[m])
                m += 1
            tr = pc.trace()
            traj.append([m, tr])
            if m == n:
                break
            if tr <= tau and nystrom_trace_error(spec, P, order[:m]) <= tau:
                break
        final = nystrom_trace_error(spec, P, order[:m])
        idx = order[:m]
    else:
        m = 1
        while True:
            cs = _draw(spec, P, sampler, cfg, seed, m)
            final = nystrom_trace_error(spec, P, cs.array())
            traj.append([m, final])
            if final <= tau or m == n:
                break
            m = _next_m(m, growth, n)
        idx = cs.array()
        meta.update({k: v for k, v in cs.params.items() if k in ("lambda_used", "S_used")})
    meta.update({"trajectory": traj, "final_trace": final, "m": int(m)})
    params = {**cfg.to_dict(), **meta}
    return ControlSet(tuple(idx), sampler, int(seed), params)


def _draw(spec, P, sampler, cfg, seed, m):
    if sampler == "kdpp":
        return mcmc_kdpp_sample(spec, P, m, cfg.mcmc_iterations, seed)
    return sample_controls(spec, P, sampler, replace(cfg, m_exact=m), seed)


# ---------------------------------------------------------------------------
# error curves

def _curve_cells(mu, spec, sampler, seed, m_values, cfg, nested, mu_norm2):
    P = mu.points
    rows = []
    if nested and sampler != "kdpp":
        t0 = time.perf_counter()
        order, _ = sampler_order(spec, P, sampler, replace(cfg, m_exact=max(m_values)), seed)
        shared = time.perf_counter() - t0
    for m in m_values:
        t0 = time.perf_counter()
        if nested and sampler != "kdpp":
            idx = order[:m]
        else:
            idx = _draw(spec, P, sampler, cfg, seed, m).array()
            shared = 0.0
        beta, L = projection_weights(mu, idx, spec)
        hat = DiracMeasure(mu.space, P[idx], beta)
        err = compression_error2(mu, hat, spec, mu_norm2=mu_norm2)
        tr = trace_error_from_factor(spec, P, P[idx], L)
        rows.append({"sampler": sampler, "m": int(m), "seed": int(seed), "squared_error": err,
                     "trace_error": tr, "wall_time_s": shared + time.perf_counter() - t0})
    return rows


def error_curve(mu, spec, m_values, samplers, seeds, cfg=None, nested=True, threads=1):
    """Long-format rows (one per sampler, m, seed) of squared and trace errors.

    In nested mode each (sampler, seed) pair draws one priority order sized for
    the largest m, and smaller m use its prefixes. ``wall_time_s`` includes
    that shared draw.
    """
    _check_space(spec, mu.space)
    cfg = cfg or SamplerConfig()
    m_values = [int(m) for m in m_values]
    if any(m < 1 or m > mu.n for m in m_values):
        raise ValueError(f"every m must lie in [1, {mu.n}]")
    norm2 = dual_norm2(mu, spec)
    jobs = [(s, seed) for s in samplers for seed in seeds]

    def run(job):
        return _curve_cells(mu, spec, job[0], job[1], m_values, cfg, nested, norm2)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    rows = [r for part in parts for r in part]
    rank = {s: i for i, s in enumerate(samplers)}
    rows.sort(key=lambda r: (rank[r["sampler"]], r["m"], r["seed"]))
    return rows
