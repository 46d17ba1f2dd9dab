"""Discrete currents and varifolds as weighted Dirac measures.

A measure stores its atoms as two arrays: ``points`` of shape (n, D) and
``weights`` of shape (n, w). For the Euclidean space R^d, D = d. For the
oriented space R^d x S^{d-1}, D = 2d, and each row is a position followed by
a unit normal. Currents carry w = d weight columns and varifolds carry w = 1.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass

import numpy as np

from .mesh import triangle_geometry


class EmptyMeasureError(ValueError):
    pass


@dataclass(frozen=True)
class BaseSpace:
    kind: str  # "euclidean" or "oriented"
    d: int = 3

    def __post_init__(self):
        if self.kind not in ("euclidean", "oriented"):
            raise ValueError(f"unknown base space kind {self.kind!r}")
        if self.kind == "oriented" and self.d not in (2, 3):
            raise ValueError("oriented spaces need d in {2, 3}")
        if self.d < 1:
            raise ValueError("dimension must be positive")

    @property
    def point_dim(self):
        return 2 * self.d if self.kind == "oriented" else self.d

    @classmethod
    def euclidean(cls, d=3):
        return cls("euclidean", d)

    @classmethod
    def oriented(cls, d=3):
        return cls("oriented", d)


@dataclass(frozen=True)
class DiracMeasure:
    """``sum_i delta_{x_i} alpha_i`` over a base space."""

    space: BaseSpace
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.points, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim == 1:
            w = w[:, None]
        w = np.ascontiguousarray(w)
        if p.ndim != 2 or p.shape[1] != self.space.point_dim:
            raise ValueError(f"points must have shape (n, {self.space.point_dim}), got {p.shape}")
        if len(p) == 0:
            raise EmptyMeasureError("measure has no atoms")
        if w.ndim != 2 or len(w) != len(p) or w.shape[1] < 1:
            raise ValueError(f"weights shape {w.shape} does not match {len(p)} atoms")
        if self.space.kind == "oriented":
            d = self.space.d
            norms = np.linalg.norm(p[:, d:], axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-12):
                raise ValueError("oriented points need unit normals (tolerance 1e-12)")
        p.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.points)

    @property
    def n(self):
        return len(self.points)

    @property
    def width(self):
        return self.weights.shape[1]

    @property
    def positions(self):
        return self.points[:, :self.space.d]

    def subset(self, indices, weights=None):
        """Atoms at ``indices``; optionally with replacement weights."""
        idx = np.asarray(indices, dtype=np.int64)
        w = self.weights[idx] if weights is None else weights
        return DiracMeasure(self.space, self.points[idx], w)

    def permuted(self, perm):
        return self.subset(perm)

    def total_mass(self):
        return float(self.weights.sum())

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        return {
            "space": {"kind": self.space.kind, "dim": self.space.d},
            "points": self.points.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, obj):
        sp = obj["space"]
        return cls(BaseSpace(sp["kind"], int(sp["dim"])), np.array(obj["points"], dtype=np.float64),
                   np.array(obj["weights"], dtype=np.float64))

    def to_json(self):
        return _dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def csv_header(self):
        d = self.space.d
        cols = [f"x{k}" for k in range(d)]
        if self.space.kind == "oriented":
            cols += [f"n{k}" for k in range(d)]
        return cols + [f"w{k}" for k in range(self.width)]

    def to_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.csv_header())
        for p, w in zip(self.points, self.weights):
            wr.writerow([_fmt(x) for x in p] + [_fmt(x) for x in w])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        header, data = rows[0], np.array(rows[1:], dtype=np.float64)
        d = sum(h.startswith("x") for h in header)
        oriented = any(h.startswith("n") for h in header)
        space = BaseSpace("oriented" if oriented else "euclidean", d)
        D = space.point_dim
        return cls(space, data[:, :D], data[:, D:])


def _fmt(x):
    return format(float(x), ".17g")


def _dumps(obj):
    # json writes floats with repr: shortest string that round-trips exactly
    return json.dumps(obj, sort_keys=True)


def current_of_mesh(mesh):
    """Current of a triangulated surface: atoms at centroids weighted by area normals."""
    centroids, nu = triangle_geometry(mesh)
    return DiracMeasure(BaseSpace.euclidean(3), centroids, nu)


def varifold_of_mesh(mesh, return_kept=False):
    """Oriented varifold: atoms (centroid, unit normal) weighted by triangle area.

    Zero-area triangles have no normal and are skipped with a warning. With
    ``return_kept`` the indices of the retained triangles are returned too.
    """
    centroids, nu = triangle_geometry(mesh)
    area = np.linalg.norm(nu, axis=1)
    kept = np.flatnonzero(area > 0)
    if len(kept) == 0:
        raise EmptyMeasureError("every triangle is degenerate; varifold would be empty")
    if len(kept) < len(area):
        warnings.warn(f"skipped {len(area) - len(kept)} zero-area triangles", stacklevel=2)
    normals = nu[kept] / area[kept, None]
    mu = DiracMeasure(BaseSpace.oriented(3), np.hstack([centroids[kept], normals]), area[kept])
    return (mu, kept) if return_kept else mu


def measure_of_mesh(mesh, rep):
    if rep == "current":
        return current_of_mesh(mesh)
    if rep == "varifold":
        return varifold_of_mesh(mesh)
    raise ValueError(f"unknown representation {rep!r}")
