"""Gauss-type quadrature on the reference triangle and the unit interval."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

MAX_DEGREE = 12


@dataclass(frozen=True)
class QuadratureRule:
    """Points in barycentric coordinates and weights summing to the reference measure."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def ref_points(self):
        """Reference coordinates: (x, y) on the triangle, t on the edge."""
        if self.points.shape[1] == 3:
            return self.points[:, 1:]
        return self.points[:, 1]


@lru_cache(maxsize=None)
def quadrature_rule(entity, exactness_degree):
    """Rule exact for polynomials up to ``exactness_degree`` on the reference entity.

    Triangles use a collapsed (Stroud conical) product of Gauss-Jacobi and
    Gauss-Legendre points, the reference triangle being ``{x, y >= 0, x + y <= 1}``.
    """
    d = int(exactness_degree)
    if d < 0:
        raise ValueError("degree must be non-negative")
    if d > MAX_DEGREE:
        raise ValueError(f"quadrature degree {d} exceeds supported maximum {MAX_DEGREE}")
    n = max(1, (d + 2) // 2)
    xg, wg = roots_legendre(n)
    t = 0.5 * (xg + 1.0)
    wt = 0.5 * wg
    if entity == "edge":
        pts = np.column_stack([1.0 - t, t])
        return QuadratureRule(pts, wt, d)
    if entity != "triangle":
        raise ValueError(f"unknown entity {entity!r}")
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    s = 0.5 * (xj + 1.0)
    ws = 0.25 * wj
    S, R = np.meshgrid(s, t, indexing="ij")
    W = np.outer(ws, wt)
    x = S.ravel()
    y = ((1.0 - S) * R).ravel()
    pts = np.column_stack([1.0 - x - y, x, y])
    return QuadratureRule(pts, W.ravel(), d)
