"""
synth.py
Synthetic registration problems with known ground truth. Ground-truth
transformations are drawn from the model class itself (Phi, A), so every
generated problem is solvable by the optimizer.
"""

import logging
from typing import Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

import config
import deform
import evaluate
import warp
from errors import InvalidInputError
from volume import (
    IDENTITY_AFFINE,
    AffineParams,
    DeformationGrid,
    GradientField,
    Landmark,
    LandmarkSet,
    Mask3,
    Volume3,
    check_dims,
    require_same_dims,
)

logger = logging.getLogger(__name__)

GroundTruthMode = Literal["both", "affine", "deformable"]


class SynthPair(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    moving: Volume3
    moving_mask: Mask3
    reference: Volume3
    reference_mask: Mask3
    reference_landmarks: LandmarkSet
    moving_landmarks: LandmarkSet
    phi: GradientField
    affine: AffineParams
    grid: DeformationGrid


# - - - Smoothing - - -

def box_blur(arr: np.ndarray, radius: int, axis: int) -> np.ndarray:
    """Mean over a window of 2 * radius + 1 along ``axis`` (truncated at the borders), via a running sum."""
    n = arr.shape[axis]
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (1, 0)
    running = np.cumsum(np.pad(arr, pad), axis=axis)

    idx = np.arange(n)
    lo = np.clip(idx - radius, 0, n)
    hi = np.clip(idx + radius + 1, 0, n)
    total = np.take(running, hi, axis=axis) - np.take(running, lo, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = n
    return total / (hi - lo).reshape(shape)


def smooth(arr: np.ndarray, radius: int, passes: int = 2) -> np.ndarray:
    out = arr
    for _ in range(passes):
        for axis in range(arr.ndim):
            out = box_blur(out, radius, axis)
    return out


# - - - Phantom - - -

def make_phantom(dims, seed: int) -> Tuple[Volume3, Mask3, LandmarkSet]:
    """
    Smooth phantom: 3-6 Gaussian blobs plus a soft ellipsoid whose 0.5 level
    set is the mask. Eleven landmarks on the ellipsoid axis extremes and blob
    centres. Intensities are normalized to [0, 1].
    """
    dims = check_dims(dims)
    if min(dims) < config.PHANTOM_MIN_DIM:
        raise InvalidInputError(f"phantom needs dims >= {config.PHANTOM_MIN_DIM}, got {dims}")
    rng = np.random.default_rng(seed)
    hi = np.array(dims, dtype=np.float64) - 1.0
    pts = np.indices(dims, dtype=np.float64)

    center = hi / 2.0 + rng.uniform(-0.05, 0.05, 3) * hi
    radii = rng.uniform(0.25, 0.35, 3) * hi
    rho = np.sqrt(sum(((pts[d] - center[d]) / radii[d]) ** 2 for d in range(3)))
    organ = 1.0 / (1.0 + np.exp((rho - 1.0) / 0.1))

    n_blobs = int(rng.integers(3, 7))
    blob_centers = rng.uniform(0.2, 0.8, (n_blobs, 3)) * hi
    sigmas = rng.uniform(0.06, 0.12, n_blobs) * hi.min()
    amps = rng.uniform(0.3, 1.0, n_blobs)

    vol = 0.6 * organ
    for c, sigma, amp in zip(blob_centers, sigmas, amps):
        dist2 = sum((pts[d] - c[d]) ** 2 for d in range(3))
        vol = vol + amp * np.exp(-dist2 / (2.0 * sigma ** 2))

    lo, top = vol.min(), vol.max()
    vol = np.clip((vol - lo) / (top - lo), 0.0, 1.0)
    mask = (rho <= 1.0).astype(np.float64)

    # axis extremes, then blob centres, then half-axis points
    candidates = []
    for d in range(3):
        for sign in (-1.0, 1.0):
            p = center.copy()
            p[d] += sign * radii[d]
            candidates.append(p)
    candidates.extend(blob_centers[:5])
    for d in range(3):
        for sign in (-1.0, 1.0):
            p = center.copy()
            p[d] += sign * 0.5 * radii[d]
            candidates.append(p)
    points = [
        Landmark(label=f"L{i + 1:02d}", z=float(p[0]), y=float(p[1]), x=float(p[2]))
        for i, p in enumerate(candidates[: config.LANDMARK_COUNT])
    ]

    return Volume3(data=vol), Mask3(data=mask), LandmarkSet(points=points)


# - - - Ground truth - - -

def make_ground_truth(dims, strength: float, seed: int, mode: GroundTruthMode = "both") -> Tuple[GradientField, AffineParams]:
    """
    Phi* = 1 + strength * (smoothed noise, zero mean and unit variance per
    channel), clipped to [1 - strength, 1 + strength]; A* = A_I plus uniform noise of
    +-0.05 * strength on the linear block and +-0.1 * strength on the translation.
    ``mode`` keeps only the affine or only the deformable part.
    """
    dims = check_dims(dims)
    if not (0.0 <= strength < 1.0):
        raise InvalidInputError(f"strength must lie in [0, 1), got {strength}")
    if mode not in ("both", "affine", "deformable"):
        raise InvalidInputError(f"unknown ground-truth mode '{mode}'")
    rng = np.random.default_rng(seed)

    radius = int(np.ceil(min(dims) / 8))
    noise = np.stack([smooth(rng.standard_normal(dims), radius) for _ in range(3)])
    noise -= noise.mean(axis=(1, 2, 3), keepdims=True)
    std = noise.std(axis=(1, 2, 3), keepdims=True)
    noise = noise / np.where(std > 0, std, 1.0)
    phi = np.clip(1.0 + strength * noise, 1.0 - strength, 1.0 + strength)

    perturb = np.hstack([
        rng.uniform(-0.05, 0.05, (3, 3)),
        rng.uniform(-0.1, 0.1, (3, 1)),
    ])
    matrix = IDENTITY_AFFINE + strength * perturb

    if mode == "affine":
        phi = np.ones_like(phi)
    elif mode == "deformable":
        matrix = IDENTITY_AFFINE.copy()

    return GradientField(data=phi), AffineParams(matrix=matrix)


def make_pair(phantom: Tuple[Volume3, Mask3, LandmarkSet], gt: Tuple[GradientField, AffineParams]) -> SynthPair:
    """
    Reference = phantom warped by the ground truth. The phantom is the moving
    image; reference landmarks sit at the phantom landmark positions and their
    moving-frame annotations are the ground-truth grid sampled there.
    """
    vol, mask, landmarks = phantom
    phi, a = gt
    require_same_dims(vol, mask, phi, what="phantom and ground truth")

    reference, grid = deform.compose_and_warp(vol, phi, a)
    reference_mask = warp.warp_mask(mask, grid)

    mapped = evaluate.sample_grid(grid, landmarks.coords())
    hi = np.array(vol.dims, dtype=np.float64) - 1.0
    ref_points, mov_points = [], []
    for p, q in zip(landmarks.points, mapped):
        if np.any(q < 0.0) or np.any(q > hi):
            logger.warning(f"landmark {p.label} maps outside the volume, dropped")
            continue
        ref_points.append(p)
        mov_points.append(Landmark(label=p.label, z=float(q[0]), y=float(q[1]), x=float(q[2])))

    return SynthPair(
        moving=vol,
        moving_mask=mask,
        reference=reference,
        reference_mask=reference_mask,
        reference_landmarks=LandmarkSet(points=ref_points),
        moving_landmarks=LandmarkSet(points=mov_points),
        phi=phi,
        affine=a,
        grid=grid,
    )


# - - - Oracle - - -

def brute_force_warp(s: Volume3, g: DeformationGrid) -> Volume3:
    """Literal double sum over every output voxel p and every source voxel q. O(N^2), test use only."""
    dims = require_same_dims(s, g, what="volume and grid")
    q = np.indices(dims, dtype=np.float64).reshape(3, -1)
    coords = g.data.reshape(3, -1)
    flat_s = s.data.ravel()
    out = np.empty(coords.shape[1])
    for i in range(coords.shape[1]):
        w = np.prod(np.maximum(0.0, 1.0 - np.abs(coords[:, i:i + 1] - q)), axis=0)
        out[i] = np.sum(flat_s * w)
    return Volume3(data=out.reshape(dims), spacing=s.spacing)
