"""
evaluate.py
Dice overlap, landmark errors and deformation-quality diagnostics.

Landmarks use the backward convention of the grids: the moving-frame location
predicted for a reference landmark is G sampled at that reference point, so
no grid inversion is needed.
"""

import logging
from typing import Dict, List

import numpy as np
from pydantic import BaseModel, Field

import warp
from errors import LandmarkError
from volume import DeformationGrid, LandmarkSet, Mask3, require_same_dims

logger = logging.getLogger(__name__)

AXES = ("z", "y", "x")


class LandmarkResult(BaseModel):
    label: str
    predicted: List[float] = Field(..., description="G sampled at the reference point, (z, y, x)")
    dz: float
    dy: float
    dx: float
    ds: float


class LandmarkReport(BaseModel):
    dx: float = Field(..., description="Mean absolute error along x")
    dy: float
    dz: float
    ds: float = Field(..., description="Mean Euclidean error")
    count: int
    landmarks: List[LandmarkResult]


class FoldReport(BaseModel):
    min_forward_gap: Dict[str, float] = Field(..., description="Smallest consecutive coordinate gap along each channel's own axis")
    max_forward_gap: Dict[str, float]
    violations: Dict[str, int] = Field(..., description="Non-increasing gaps per axis")
    total_violations: int
    jacobian_min: float = Field(..., description="Smallest Jacobian determinant (diagnostic only)")
    jacobian_nonpositive: int


def dice(a: Mask3, b: Mask3) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    require_same_dims(a, b, what="masks")
    total = a.data.sum() + b.data.sum()
    if total == 0:
        logger.warning("dice of two empty masks, reporting 1.0")
        return 1.0
    return float(2.0 * np.sum(a.data * b.data) / total)


def sample_grid(g: DeformationGrid, points: np.ndarray) -> np.ndarray:
    """Trilinear sample of every grid channel at (K, 3) points; returns (K, 3)."""
    coords = points.T.reshape(3, -1)
    return np.stack([warp.sample(g.data[d], coords)[0] for d in range(3)], axis=1)


def landmark_error(g: DeformationGrid, ref_pts: LandmarkSet, mov_pts: LandmarkSet) -> LandmarkReport:
    """
    Per-landmark and mean errors between G(reference point) and the annotated
    moving point. dx, dy, dz are mean absolute errors per axis, ds the mean
    Euclidean distance.
    """
    if sorted(ref_pts.labels) != sorted(mov_pts.labels):
        raise LandmarkError(f"landmark labels differ: {sorted(ref_pts.labels)} vs {sorted(mov_pts.labels)}")
    if not ref_pts.points:
        raise LandmarkError("no landmarks to evaluate")
    ref_pts.check_bounds(g.dims)
    mov_pts.check_bounds(g.dims)

    moving = mov_pts.by_label()
    predicted = sample_grid(g, ref_pts.coords())
    annotated = np.stack([moving[label].coords for label in ref_pts.labels])
    diff = np.abs(predicted - annotated)
    dist = np.sqrt(np.sum((predicted - annotated) ** 2, axis=1))

    results = [
        LandmarkResult(
            label=label,
            predicted=predicted[i].tolist(),
            dz=float(diff[i, 0]),
            dy=float(diff[i, 1]),
            dx=float(diff[i, 2]),
            ds=float(dist[i]),
        )
        for i, label in enumerate(ref_pts.labels)
    ]
    mean = diff.mean(axis=0)
    return LandmarkReport(
        dz=float(mean[0]),
        dy=float(mean[1]),
        dx=float(mean[2]),
        ds=float(dist.mean()),
        count=len(results),
        landmarks=results,
    )


def jacobian_determinant(g: DeformationGrid) -> np.ndarray:
    """Determinant of dG/dp by central differences (one-sided at the borders)."""
    jac = np.empty((3, 3) + g.dims)
    for i in range(3):
        grads = np.gradient(g.data[i])
        for j in range(3):
            jac[i, j] = grads[j]
    return (
        jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
        - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
        + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0])
    )


def fold_check(g: DeformationGrid) -> FoldReport:
    """Consecutive coordinate gaps along each channel's own axis; a gap <= 0 is a fold."""
    min_gap, max_gap, violations = {}, {}, {}
    for d, axis in enumerate(AXES):
        gaps = np.diff(g.data[d], axis=d)
        min_gap[axis] = float(gaps.min())
        max_gap[axis] = float(gaps.max())
        violations[axis] = int(np.count_nonzero(gaps <= 0.0))
    det = jacobian_determinant(g)
    return FoldReport(
        min_forward_gap=min_gap,
        max_forward_gap=max_gap,
        violations=violations,
        total_violations=sum(violations.values()),
        jacobian_min=float(det.min()),
        jacobian_nonpositive=int(np.count_nonzero(det <= 0.0)),
    )
