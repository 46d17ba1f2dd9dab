"""Nyström machinery: trace error, ridge leverage scores and control-point samplers.

Every sampler is deterministic given a 64-bit seed. Randomness comes from a
Philox counter-based generator seeded through ``SeedSequence``, with
independent child streams for independent tasks.

Weighted samplers draw without replacement by Efraimidis-Spirakis keys, which
yields a full priority order over atoms; a size-m sample is the first m
entries. Prefixes of one order are therefore nested, which the size-selection
loop in :mod:`measurezip.compress` relies on.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, solve_triangular

from .kernels import _block_rows, cholesky_jitter, kernel_matrix

DENSE_CAP = 20000
SAMPLERS = ("uniform", "exact_rls", "rls", "kdpp")


def _points(x):
    return np.asarray(getattr(x, "points", x), dtype=np.float64)


def make_rng(seed, *stream):
    """Philox generator for ``seed``; ``stream`` integers select an independent substream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass(frozen=True)
class ControlSet:
    """Ordered distinct atom indices plus the provenance of the draw."""

    indices: tuple
    sampler: str = "given"
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        idx = tuple(int(i) for i in np.asarray(self.indices, dtype=np.int64).ravel())
        if len(set(idx)) != len(idx):
            raise ValueError("control indices must be distinct")
        if idx and min(idx) < 0:
            raise ValueError("control indices must be non-negative")
        object.__setattr__(self, "indices", idx)

    @property
    def m(self):
        return len(self.indices)

    def __len__(self):
        return len(self.indices)

    def array(self):
        return np.array(self.indices, dtype=np.int64)

    def check(self, n):
        if self.m < 1 or self.m > n:
            raise ValueError(f"control set size {self.m} outside [1, {n}]")
        if max(self.indices) >= n:
            raise ValueError(f"control index {max(self.indices)} out of range for {n} atoms")

    def to_dict(self):
        return {"indices": list(self.indices), "sampler": self.sampler, "seed": self.seed,
                "params": self.params}

    @classmethod
    def from_dict(cls, obj):
        return cls(tuple(obj["indices"]), obj.get("sampler", "given"), obj.get("seed"),
                   dict(obj.get("params", {})))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler parameters.

    ``S`` is the target rank and ``delta`` the failure probability; together
    they fix m = ceil(S log(S/delta)) unless ``m_exact`` is given. A
    ``lambda_reg`` of 0 picks the ridge from the spectrum tail beyond rank S.
    """

    S: int | None = None
    delta: float = 0.01
    lambda_reg: float = 0.0
    mcmc_iterations: int = 1000
    m_exact: int | None = None
    base_case: int = 1024
    oversample: float = 2.0

    def __post_init__(self):
        if self.S is not None and self.S < 1:
            raise ValueError("S must be at least 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")
        if self.mcmc_iterations < 1:
            raise ValueError("mcmc_iterations must be positive")
        if self.m_exact is not None and self.m_exact < 1:
            raise ValueError("m_exact must be at least 1")
        if self.base_case < 2:
            raise ValueError("base_case must be at least 2")

    @property
    def guarantees_hold(self):
        return self.delta < 1.0 / 32.0

    def sample_size(self, n):
        if self.m_exact is not None:
            return min(self.m_exact, n)
        if self.S is None:
            raise ValueError("need either S or m_exact")
        return min(math.ceil(self.S * math.log(self.S / self.delta)), n)

    def rank(self):
        """S, derived from ``m_exact`` when not given (largest S with S log(S/delta) <= m)."""
        if self.S is not None:
            return self.S
        if self.m_exact is None:
            raise ValueError("need either S or m_exact")
        S = 1
        while math.ceil((S + 1) * math.log((S + 1) / self.delta)) <= self.m_exact:
            S += 1
        return S

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# trace error and exact quantities

def _factor_controls(spec, P, idx):
    return cholesky_jitter(kernel_matrix(spec, P[idx]))


def trace_error_from_factor(spec, P, C, L):
    """``sum_i k_ii - ||L^{-1} K_C,i||^2`` given the lower Cholesky factor ``L`` of K_CC."""
    total = float(np.sum(spec.diag(P)))
    captured = 0.0
    step = _block_rows(len(P), len(C))
    for s in range(0, len(P), step):
        R = solve_triangular(L, spec.matrix(C, P[s:s + step]), lower=True, check_finite=False)
        captured += float(np.einsum("ij,ij->", R, R))
    return total - captured


def nystrom_trace_error(spec, points, controls):
    """``tr(K_XX - K_XC K_CC^{-1} K_CX)`` without forming K_XX.

    An empty control set gives the plain trace.
    """
    P = _points(points)
    idx = controls.array() if isinstance(controls, ControlSet) else np.asarray(controls, dtype=np.int64)
    if len(idx) == 0:
        return float(np.sum(spec.diag(P)))
    (L, _), _ = _factor_controls(spec, P, idx)
    return trace_error_from_factor(spec, P, P[idx], np.tril(L))


def _check_cap(n, cap):
    if n > cap:
        raise ValueError(f"{n} atoms exceeds the dense cap of {cap}")


def exact_rls(spec, points, lambda_reg, cap=DENSE_CAP):
    """Ridge leverage scores ``diag(K (K + lambda I)^{-1}) = 1 - lambda diag((K + lambda I)^{-1})``."""
    if not lambda_reg > 0:
        raise ValueError("lambda_reg must be positive")
    P = _points(points)
    _check_cap(len(P), cap)
    K = kernel_matrix(spec, P)
    n = len(K)
    try:
        c, low = cho_factor(K + lambda_reg * np.eye(n), lower=True)
        Linv = solve_triangular(np.tril(c), np.eye(n), lower=True)
        inv_diag = np.einsum("ij,ij->j", Linv, Linv)
        return 1.0 - lambda_reg * inv_diag
    except LinAlgError:
        # indefinite round-off: fall back to the spectral form
        e, U = np.linalg.eigh(K)
        e = np.clip(e, 0.0, None)
        return (U * U) @ (e / (e + lambda_reg))


def eigen_tail_sum(spec, points, m, cap=DENSE_CAP):
    """Sum of all but the ``m`` largest eigenvalues of K_XX."""
    P = _points(points)
    _check_cap(len(P), cap)
    e = np.linalg.eigvalsh(kernel_matrix(spec, P))[::-1]
    return float(np.sum(e[m:]))


# ---------------------------------------------------------------------------
# samplers

def priority_order(weights, rng):
    """Order of a weighted draw without replacement over all indices.

    Uses keys ``log(u) / w``; taking a prefix of length m is a weighted
    size-m sample without replacement.
    """
    w = np.asarray(weights, dtype=np.float64)
    u = rng.random(len(w))
    with np.errstate(divide="ignore"):
        keys = np.log(u) / w
    return np.argsort(-keys, kind="stable")


def uniform_order(n, seed):
    return make_rng(seed, 0).permutation(n)


def uniform_sample(n, m, seed):
    if m > n:
        raise ValueError(f"cannot draw {m} distinct indices from {n}")
    if m < 1:
        raise ValueError("m must be at least 1")
    return ControlSet(tuple(uniform_order(n, seed)[:m]), "uniform", int(seed), {"n": int(n), "m": int(m)})


def auto_lambda(spec, P, S, rng, sample_size):
    """Ridge set to the tail eigenvalue mass beyond rank S divided by S.

    The spectrum of K_XX is estimated from a uniform subsample of at most
    ``sample_size`` atoms, rescaled by n / s.
    """
    n = len(P)
    s = min(n, sample_size)
    idx = np.sort(rng.choice(n, size=s, replace=False)) if s < n else np.arange(n)
    e = np.linalg.eigvalsh(kernel_matrix(spec, P[idx]))[::-1] * (n / s)
    e = np.clip(e, 0.0, None)
    lam = float(np.sum(e[S:])) / S
    floor = 1e-10 * float(np.mean(spec.diag(P)))
    return max(lam, floor)


def _sketch_scores(spec, P, S_idx, p, lam):
    """Scores of every row of ``P`` against a weighted sketch ``S_idx`` with inclusion probabilities ``p``."""
    KSS = kernel_matrix(spec, P[S_idx])
    KSS[np.diag_indices(len(S_idx))] += lam * p
    (L, _), _ = cholesky_jitter(KSS)
    L = np.tril(L)
    C = P[S_idx]
    out = np.empty(len(P))
    step = _block_rows(len(P), len(S_idx))
    for s in range(0, len(P), step):
        R = solve_triangular(L, spec.matrix(C, P[s:s + step]), lower=True, check_finite=False)
        out[s:s + step] = spec.diag(P[s:s + step]) - np.einsum("ij,ij->j", R, R)
    return out / lam


def _recursive_scores(spec, P, lam, rng, base_case, oversample):
    n = len(P)
    if n <= base_case:
        return np.clip(exact_rls(spec, P, lam), 0.0, 1.0)
    half = np.flatnonzero(rng.random(n) < 0.5)
    if len(half) in (0, n):
        half = rng.permutation(n)[: n // 2]
    sub = _recursive_scores(spec, P[half], lam, rng, base_case, oversample)
    p = np.minimum(1.0, oversample * sub)
    keep = rng.random(len(half)) < p
    if not keep.any():
        keep[np.argmax(p)] = True
    scores = np.clip(_sketch_scores(spec, P, half[keep], p[keep], lam), 0.0, 1.0)
    return np.maximum(scores, 1e-12 * max(scores.max(), 1e-300))


def recursive_rls_scores(spec, points, cfg, seed):
    """Approximate ridge leverage scores by recursive halving, plus the ridge used."""
    P = _points(points)
    rng = make_rng(seed, 1)
    lam = cfg.lambda_reg if cfg.lambda_reg > 0 else auto_lambda(spec, P, cfg.rank(), rng, cfg.base_case)
    return _recursive_scores(spec, P, lam, rng, cfg.base_case, cfg.oversample), lam


def rls_order(spec, points, cfg, seed):
    scores, lam = recursive_rls_scores(spec, points, cfg, seed)
    return priority_order(scores, make_rng(seed, 2)), lam


def recursive_rls_sample(spec, points, cfg, seed):
    P = _points(points)
    m = cfg.sample_size(len(P))
    order, lam = rls_order(spec, P, cfg, seed)
    params = {**cfg.to_dict(), "lambda_used": lam, "S_used": cfg.rank(), "m": m}
    return ControlSet(tuple(order[:m]), "rls", int(seed), params)


def exact_rls_order(spec, points, cfg, seed):
    P = _points(points)
    rng = make_rng(seed, 1)
    lam = cfg.lambda_reg if cfg.lambda_reg > 0 else auto_lambda(spec, P, cfg.rank(), rng, cfg.base_case)
    return priority_order(np.clip(exact_rls(spec, P, lam), 1e-300, None), make_rng(seed, 2)), lam


def exact_rls_sample(spec, points, cfg, seed):
    P = _points(points)
    m = cfg.sample_size(len(P))
    order, lam = exact_rls_order(spec, P, cfg, seed)
    params = {**cfg.to_dict(), "lambda_used": lam, "S_used": cfg.rank(), "m": m}
    return ControlSet(tuple(order[:m]), "exact_rls", int(seed), params)


def dac_rls_sample(*args, **kwargs):
    raise NotImplementedError("divide-and-conquer RLS sampling is not implemented; use recursive RLS")


# ---------------------------------------------------------------------------
# MCMC k-DPP

def _kdpp_chains(kcols, kdiag, n, m, R, rng, n_chains, refresh, kfull_sub):
    """Run ``n_chains`` swap chains in lockstep; returns final index sets (n_chains, m).

    ``A`` holds the inverse of K_S + eps I per chain and is updated by rank-one
    formulas; ``kfull_sub(S)`` rebuilds K_S for periodic exact refreshes.
    """
    eps = 1e-10 * float(np.mean(kdiag))
    B = n_chains
    init = np.argsort(rng.random((B, n)), axis=1)
    S = np.ascontiguousarray(init[:, :m])
    out = np.ascontiguousarray(init[:, m:])
    if m == n or m == 0:
        return S
    eye = np.eye(m)
    A = np.linalg.inv(kfull_sub(S) + eps * eye)
    rows = np.arange(B)
    for r in range(R):
        pi = rng.integers(m, size=B)
        oi = rng.integers(n - m, size=B)
        j = out[rows, oi]
        Ap = A[rows, :, pi]
        App = Ap[rows, pi]
        G = A - Ap[:, :, None] * Ap[:, None, :] / App[:, None, None]
        c0 = kcols(S, j)
        c0[rows, pi] = 0.0
        g = np.einsum("bij,bj->bi", G, c0)
        s = kdiag[j] + eps - np.einsum("bi,bi->b", c0, g)
        ratio = App * s
        acc = rng.random(B) < 0.5 * np.minimum(1.0, ratio)
        if acc.any():
            a = np.flatnonzero(acc)
            u = g[a]
            u[np.arange(len(a)), pi[a]] -= 1.0
            A[a] = G[a] + u[:, :, None] * u[:, None, :] / s[a, None, None]
            old = S[a, pi[a]]
            S[a, pi[a]] = j[a]
            out[a, oi[a]] = old
        if refresh and (r + 1) % refresh == 0:
            A = np.linalg.inv(kfull_sub(S) + eps * eye)
    return S


def mcmc_kdpp_chains(spec, points, m, R, seed, n_chains, refresh=500, cap=4096):
    """Final states of independent swap chains targeting the m-DPP of K_XX (small n)."""
    P = _points(points)
    n = len(P)
    _check_cap(n, cap)
    if not 1 <= m <= n:
        raise ValueError(f"m must lie in [1, {n}]")
    K = kernel_matrix(spec, P)
    kd = np.diag(K).copy()

    def kcols(S, j):
        return K[S, j[:, None]]

    def ksub(S):
        return K[S[:, :, None], S[:, None, :]]

    return _kdpp_chains(kcols, kd, n, m, R, make_rng(seed, 3), n_chains, refresh, ksub)


def mcmc_kdpp_sample(spec, points, m, R, seed, refresh=500):
    """Single swap chain for the m-DPP; kernel columns are evaluated on demand."""
    P = _points(points)
    n = len(P)
    if not 1 <= m <= n:
        raise ValueError(f"m must lie in [1, {n}]")
    if R < 1:
        raise ValueError("R must be positive")
    kd = spec.diag(P)

    def kcols(S, j):
        return np.stack([spec.matrix(P[S[b]], P[j[b]][None, :])[:, 0] for b in range(len(j))])

    def ksub(S):
        return np.stack([kernel_matrix(spec, P[S[b]]) for b in range(len(S))])

    S = _kdpp_chains(kcols, kd, n, m, R, make_rng(seed, 3), 1, refresh, ksub)[0]
    return ControlSet(tuple(S), "kdpp", int(seed), {"m": int(m), "mcmc_iterations": int(R)})


# ---------------------------------------------------------------------------
# dispatch

def sample_controls(spec, points, sampler, cfg, seed):
    """Draw a control set with the named sampler; the size comes from ``cfg``."""
    P = _points(points)
    n = len(P)
    if sampler == "uniform":
        return uniform_sample(n, cfg.sample_size(n), seed)
    if sampler == "rls":
        return recursive_rls_sample(spec, P, cfg, seed)
    if sampler == "exact_rls":
        return exact_rls_sample(spec, P, cfg, seed)
    if sampler == "kdpp":
        return mcmc_kdpp_sample(spec, P, cfg.sample_size(n), cfg.mcmc_iterations, seed)
    if sampler == "dac":
        return dac_rls_sample(spec, P, cfg, seed)
    raise ValueError(f"unknown sampler {sampler!r}")


def sampler_order(spec, points, sampler, cfg, seed):
    """Full priority order for samplers whose size-m draws are nested prefixes."""
    P = _points(points)
    if sampler == "uniform":
        return uniform_order(len(P), seed), {}
    if sampler == "rls":
        order, lam = rls_order(spec, P, cfg, seed)
        return order, {"lambda_used": lam, "S_used": cfg.rank()}
    if sampler == "exact_rls":
        order, lam = exact_rls_order(spec, P, cfg, seed)
        return order, {"lambda_used": lam, "S_used": cfg.rank()}
    raise ValueError(f"sampler {sampler!r} does not produce nested draws")
