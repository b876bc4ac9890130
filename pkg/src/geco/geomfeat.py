"""Local geometric feature extraction via eigen-analysis of the group
covariance (local PCA).

For a neighborhood with sorted covariance eigenvalues l1 >= l2 >= l3 >= 0:

    linearity = (l1 - l2) / l1
    planarity = (l2 - l3) / l1
    saliency  = l3 / (l1 + l2 + l3)      (surface-variation form, default)

A fully degenerate neighborhood (l1 = 0, e.g. duplicated points) yields
all-zero features with the ``degenerate`` flag set instead of an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateGroupError
from .pointcloud import LocalGroup

SALIENCY_SURFACE_VARIATION = "surface_variation"
SALIENCY_EIG_RATIO = "eig_ratio"


@dataclass(frozen=True)
class GeomFeatures:
    linearity: float
    planarity: float
    saliency: float
    eigvals: tuple
    degenerate: bool = False


def symmetric_eigvals_3x3(a: np.ndarray) -> tuple:
    """Eigenvalues of a real symmetric 3x3 matrix, sorted descending.

    Closed form via the characteristic cubic with trigonometric roots
    (no iteration). With exact arithmetic the acos argument lies in
    [-1, 1]; it is clamped against roundoff.
    """
    a = np.asarray(a, dtype=np.float64)
    p1 = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
    if p1 == 0.0:
        d = np.sort(np.diag(a))[::-1]
        return (float(d[0]), float(d[1]), float(d[2]))
    q = np.trace(a) / 3.0
    p2 = np.sum((np.diag(a) - q) ** 2) + 2.0 * p1
    p = math.sqrt(p2 / 6.0)
    b = (a - q * np.eye(3)) / p
    r = np.linalg.det(b) / 2.0
    r = min(1.0, max(-1.0, r))
    phi = math.acos(r) / 3.0
    l1 = q + 2.0 * p * math.cos(phi)
    l3 = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    return (l1, l2, l3)


def covariance_eigvals(group: LocalGroup) -> tuple:
    """Sorted eigenvalues of the group's sample covariance.

    The covariance is centered at the centroid with divisor k (population
    form). Tiny negative eigenvalues from roundoff are clamped to zero;
    the matrix is positive semi-definite by construction.
    """
    pts = group.member_points
    if pts.shape[0] < 3:
        raise DegenerateGroupError(f"covariance needs >= 3 members, got {pts.shape[0]}")
    q = pts - group.centroid
    cov = (q.T @ q) / pts.shape[0]
    l1, l2, l3 = symmetric_eigvals_3x3(cov)
    return (max(l1, 0.0), max(l2, 0.0), max(l3, 0.0))


def geometric_features(group: LocalGroup, saliency_mode=SALIENCY_SURFACE_VARIATION) -> GeomFeatures:
    """Linearity, planarity, and saliency of a local group.

    ``saliency_mode`` selects the saliency formula: surface variation
    l3/(l1+l2+l3) (default) or the plain ratio l3/l1.
    """
    l1, l2, l3 = covariance_eigvals(group)
    if l1 <= 0.0:
        return GeomFeatures(0.0, 0.0, 0.0, (0.0, 0.0, 0.0), degenerate=True)
    if saliency_mode == SALIENCY_SURFACE_VARIATION:
        saliency = l3 / (l1 + l2 + l3)
    elif saliency_mode == SALIENCY_EIG_RATIO:
        saliency = l3 / l1
    else:
        raise ConfigError(f"unknown saliency mode {saliency_mode!r}")
    return GeomFeatures(
        linearity=(l1 - l2) / l1,
        planarity=(l2 - l3) / l1,
        saliency=saliency,
        eigvals=(l1, l2, l3),
    )
