"""Scalar kernels on base spaces and exact dual metrics between Dirac measures.

All kernels act on rows of point arrays. Spatial kernels (``Gaussian``,
``SumOfGaussians``) read whole rows as positions; spherical kernels read rows
as unit vectors; ``Product`` splits each row in half, the first half going to
the spatial part and the second to the spherical part. That matches the point
layout of :class:`~measurezip.measures.DiracMeasure`.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor
from scipy.spatial.distance import cdist

# number of kernel entries materialised at once by the blocked reductions
BLOCK_ENTRIES = 1 << 22

JITTER_START = 1e-10
JITTER_MAX = 1e-6


class FactorizationError(LinAlgError):
    """Cholesky failed even at the largest permitted jitter."""


class Kernel:
    """Base class; subclasses implement ``matrix``, ``diag`` and ``grad``."""

    expects = "euclidean"

    def matrix(self, A, B):
        raise NotImplementedError

    def diag(self, A):
        raise NotImplementedError

    def grad(self, A, B, W):
        """Gradients of ``sum_ab W[a, b] k(A[a], B[b])`` w.r.t. ``A`` and ``B``."""
        raise NotImplementedError

    def to_config(self):
        raise NotImplementedError

    def __call__(self, x, y):
        return eval_kernel(self, x, y)


@dataclass(frozen=True)
class Gaussian(Kernel):
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("Gaussian bandwidth must be positive")

    def radial(self, r2):
        """Profile ``k(r2)`` and its first two derivatives in ``r2``."""
        c = 1.0 / (2.0 * self.sigma ** 2)
        k = np.exp(-c * r2)
        return k, -c * k, c * c * k

    def matrix(self, A, B):
        return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * self.sigma ** 2))

    def diag(self, A):
        return np.ones(len(A))

    def grad(self, A, B, W):
        WK = W * self.matrix(A, B)
        s2 = self.sigma ** 2
        gA = (WK @ B - WK.sum(axis=1)[:, None] * A) / s2
        gB = (WK.T @ A - WK.sum(axis=0)[:, None] * B) / s2
        return gA, gB

    def to_config(self):
        return {"gaussian": self.sigma}


@dataclass(frozen=True)
class SumOfGaussians(Kernel):
    sigmas: tuple

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if not self.sigmas or min(self.sigmas) <= 0:
            raise ValueError("need at least one positive bandwidth")

    @property
    def parts(self):
        return [Gaussian(s) for s in self.sigmas]

    def radial(self, r2):
        k = dk = d2k = 0.0
        for g in self.parts:
            a, b, c = g.radial(r2)
            k, dk, d2k = k + a, dk + b, d2k + c
        return k, dk, d2k

    def matrix(self, A, B):
        D2 = cdist(A, B, "sqeuclidean")
        return sum(np.exp(-D2 / (2.0 * s ** 2)) for s in self.sigmas)

    def diag(self, A):
        return np.full(len(A), float(len(self.sigmas)))

    def grad(self, A, B, W):
        gA = np.zeros_like(A, dtype=float)
        gB = np.zeros_like(B, dtype=float)
        for g in self.parts:
            a, b = g.grad(A, B, W)
            gA += a
            gB += b
        return gA, gB

    def to_config(self):
        return {"sum_of_gaussians": list(self.sigmas)}


@dataclass(frozen=True)
class SphericalGaussian(Kernel):
    """``exp(-(2 - 2<s, r>) / (2 sigma^2))`` on unit vectors."""

    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("spherical bandwidth must be positive")

    def matrix(self, A, B):
        return np.exp(-(2.0 - 2.0 * (A @ B.T)) / (2.0 * self.sigma ** 2))

    def diag(self, A):
        return np.exp(-(2.0 - 2.0 * np.einsum("ij,ij->i", A, A)) / (2.0 * self.sigma ** 2))

    def grad(self, A, B, W):
        WK = W * self.matrix(A, B)
        s2 = self.sigma ** 2
        return WK @ B / s2, WK.T @ A / s2

    def to_config(self):
        return {"spherical_gaussian": self.sigma}


@dataclass(frozen=True)
class LinearSpherical(Kernel):
    """``<s, r>``; with it a varifold metric reduces to the current metric."""

    def matrix(self, A, B):
        return A @ B.T

    def diag(self, A):
        return np.einsum("ij,ij->i", A, A)

    def grad(self, A, B, W):
        return W @ B, W.T @ A

    def to_config(self):
        return {"linear_spherical": {}}


_SPATIAL = (Gaussian, SumOfGaussians)
_SPHERICAL = (SphericalGaussian, LinearSpherical)


@dataclass(frozen=True)
class Product(Kernel):
    spatial: Kernel
    spherical: Kernel

    expects = "oriented"

    def __post_init__(self):
        if not isinstance(self.spatial, _SPATIAL) or not isinstance(self.spherical, _SPHERICAL):
            raise ValueError("Product combines a spatial kernel with a spherical kernel")

    @staticmethod
    def _split(A):
        h = A.shape[1] // 2
        return A[:, :h], A[:, h:]

    def matrix(self, A, B):
        Ax, As = self._split(A)
        Bx, Bs = self._split(B)
        return self.spatial.matrix(Ax, Bx) * self.spherical.matrix(As, Bs)

    def diag(self, A):
        Ax, As = self._split(A)
        return self.spatial.diag(Ax) * self.spherical.diag(As)

    def grad(self, A, B, W):
        Ax, As = self._split(A)
        Bx, Bs = self._split(B)
        Kx = self.spatial.matrix(Ax, Bx)
        Ks = self.spherical.matrix(As, Bs)
        gAx, gBx = self.spatial.grad(Ax, Bx, W * Ks)
        gAs, gBs = self.spherical.grad(As, Bs, W * Kx)
        return np.hstack([gAx, gAs]), np.hstack([gBx, gBs])

    def to_config(self):
        return {"product": {"spatial": self.spatial.to_config(), "spherical": self.spherical.to_config()}}


# ---------------------------------------------------------------------------
# config parsing

def parse_kernel_spec(cfg):
    """Build a kernel from a config dict or JSON text.

    >>> parse_kernel_spec('{"product": {"spatial": {"gaussian": 0.3}, '
    ...                   '"spherical": {"spherical_gaussian": 0.5}}}')
    Product(spatial=Gaussian(sigma=0.3), spherical=SphericalGaussian(sigma=0.5))
    """
    if isinstance(cfg, Kernel):
        return cfg
    if isinstance(cfg, str):
        cfg = json.loads(cfg)
    if cfg == "linear_spherical":
        return LinearSpherical()
    if not isinstance(cfg, dict) or len(cfg) != 1:
        raise ValueError(f"kernel config must be a single-key object, got {cfg!r}")
    (name, val), = cfg.items()
    if name == "gaussian":
        return Gaussian(float(val))
    if name == "spherical_gaussian":
        return SphericalGaussian(float(val))
    if name == "linear_spherical":
        return LinearSpherical()
    if name == "sum_of_gaussians":
        return SumOfGaussians(tuple(val))
    if name == "product":
        return Product(parse_kernel_spec(val["spatial"]), parse_kernel_spec(val["spherical"]))
    raise ValueError(f"unknown kernel {name!r}")


# ---------------------------------------------------------------------------
# evaluation

def eval_kernel(spec, x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(spec.matrix(x[None, :], y[None, :])[0, 0])


def kernel_matrix(spec, A, B=None):
    """Kernel matrix between point rows of ``A`` and ``B`` (``B=None`` means ``A``).

    The self case is computed once and mirrored so it is exactly symmetric.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    if len(A) == 0:
        raise ValueError("empty point set")
    if B is None or B is A:
        K = spec.matrix(A, A)
        iu = np.triu_indices(len(A), 1)
        K[iu[1], iu[0]] = K[iu]
        return K
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if len(B) == 0:
        raise ValueError("empty point set")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    return spec.matrix(A, B)


def _block_rows(n_rows, n_cols):
    return max(1, min(n_rows, BLOCK_ENTRIES // max(n_cols, 1)))


def kernel_apply(spec, A, B, W):
    """``K(A, B) @ W`` without holding the full kernel matrix."""
    W = np.asarray(W, dtype=np.float64)
    out = np.empty((len(A), W.shape[1]))
    step = _block_rows(len(A), len(B))
    for s in range(0, len(A), step):
        out[s:s + step] = spec.matrix(A[s:s + step], B) @ W
    return out


def cholesky_jitter(K):
    """Cholesky factor of ``K + eps I`` with ``eps`` starting at 1e-10 x mean diagonal.

    The jitter grows tenfold on failure up to 1e-6 x mean diagonal. Returns the
    ``cho_factor`` tuple and the absolute jitter used.
    """
    scale = float(np.mean(np.diag(K)))
    if not np.isfinite(scale) or scale <= 0:
        raise FactorizationError("kernel matrix has a non-positive mean diagonal")
    rel = JITTER_START
    idx = np.diag_indices(len(K))
    while rel <= JITTER_MAX * (1 + 1e-9):
        Kj = K.copy()
        Kj[idx] += rel * scale
        try:
            return cho_factor(Kj, lower=True, check_finite=True), rel * scale
        except LinAlgError:
            rel *= 10.0
    raise FactorizationError(f"matrix not positive definite even with jitter {JITTER_MAX:g} x mean diagonal")


def _check_pair(mu, kappa, spec):
    if mu.space != kappa.space:
        raise ValueError(f"space mismatch: {mu.space} vs {kappa.space}")
    if mu.width != kappa.width:
        raise ValueError(f"weight width mismatch: {mu.width} vs {kappa.width}")
    _check_space(spec, mu.space)


def _check_space(spec, space):
    if spec.expects != space.kind:
        raise ValueError(f"{type(spec).__name__} kernel does not act on a {space.kind} space")


def dual_inner(mu, kappa, spec):
    """``sum_ij k(x_i, y_j) <alpha_i, beta_j>``."""
    _check_pair(mu, kappa, spec)
    total = 0.0
    step = _block_rows(mu.n, kappa.n)
    for s in range(0, mu.n, step):
        KB = spec.matrix(mu.points[s:s + step], kappa.points) @ kappa.weights
        total += float(np.sum(mu.weights[s:s + step] * KB))
    return total


def dual_norm2(mu, spec):
    return dual_inner(mu, mu, spec)


def dual_distance2(mu, kappa, spec, mu_norm2=None, kappa_norm2=None):
    """Squared dual distance by polarization; tiny negative round-off is clamped to 0.

    Precomputed squared norms may be passed to skip those sums.
    """
    a = dual_norm2(mu, spec) if mu_norm2 is None else mu_norm2
    b = dual_norm2(kappa, spec) if kappa_norm2 is None else kappa_norm2
    d2 = a - 2.0 * dual_inner(mu, kappa, spec) + b
    if d2 < 0:
        if d2 < -1e-9 * max(a + b, 1e-300):
            warnings.warn(f"negative squared distance {d2:.3e}; is the kernel positive definite?",
                          RuntimeWarning, stacklevel=2)
        d2 = 0.0
    return d2
