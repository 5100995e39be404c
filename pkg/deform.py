"""
deform.py
Build deformation grids from the two parameterizations and compose them:
G_N from the spatial-gradient field Phi (cumulative sum per axis), G_A from a
3 x 4 affine matrix in normalized [-1, 1] coordinates, and the deformable part
applied first, followed by the affine part.
"""

import numpy as np

import warp
from errors import InvalidInputError
from volume import (
    IDENTITY_AFFINE,
    AffineParams,
    DeformationGrid,
    GradientField,
    Volume3,
    check_dims,
    require_same_dims,
)


# - - - Deformable part - - -

def integrate_array(phi: np.ndarray) -> np.ndarray:
    """Inclusive cumulative sum of channel d along axis d, minus 1."""
    grid = np.empty_like(phi)
    for d in range(3):
        grid[d] = np.cumsum(phi[d], axis=d) - 1.0
    return grid


def integrate_adjoint(upstream: np.ndarray) -> np.ndarray:
    """Transpose of ``integrate_array``: suffix sum of channel d along axis d."""
    out = np.empty_like(upstream)
    for d in range(3):
        flipped = np.flip(upstream[d], axis=d)
        out[d] = np.flip(np.cumsum(flipped, axis=d), axis=d)
    return out


def integrate_gradients(phi: GradientField) -> DeformationGrid:
    """
    G_N from Phi. Phi == 1 gives the identity grid; Phi in (0, 2) makes each
    channel strictly increasing along its own axis, so the grid never folds.
    """
    if not ((phi.data > 0.0) & (phi.data < 2.0)).all():
        raise InvalidInputError("gradient field values must lie strictly in (0, 2)")
    return DeformationGrid(data=integrate_array(phi.data))


# - - - Affine part - - -

def normalized_coords(dims) -> np.ndarray:
    """(4, nz, ny, nx) augmented coordinates [z, y, x, 1] with each axis mapped onto [-1, 1]."""
    dims = check_dims(dims)
    axes = [np.linspace(-1.0, 1.0, n) for n in dims]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    return np.stack([zz, yy, xx, np.ones(dims)])


def half_extent(dims) -> np.ndarray:
    """Voxels per normalized unit along each axis, (n_d - 1) / 2."""
    return (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0


def affine_array(matrix: np.ndarray, dims) -> np.ndarray:
    """
    Voxel coordinates of G_A. Computed as identity plus the displacement
    (A - A_I) n, so A == A_I reproduces the identity grid exactly.
    """
    dims = check_dims(dims)
    nbar = normalized_coords(dims)
    delta = np.tensordot(matrix - IDENTITY_AFFINE, nbar, axes=([1], [0]))
    return np.indices(dims, dtype=np.float64) + delta * half_extent(dims)[:, None, None, None]


def affine_grid(a: AffineParams, dims) -> DeformationGrid:
    """G_A: map voxels to [-1, 1], apply A, map back to voxel coordinates."""
    return DeformationGrid(data=affine_array(a.matrix, dims))


def affine_adjoint(upstream: np.ndarray, dims) -> np.ndarray:
    """Gradient of sum(upstream * G_A) with respect to the 12 entries of A."""
    nbar = normalized_coords(dims)
    grad = np.empty((3, 4))
    scale = half_extent(dims)
    for d in range(3):
        for k in range(4):
            grad[d, k] = np.sum(upstream[d] * nbar[k]) * scale[d]
    return grad


# - - - Composition - - -

def effective_array(grid_n: np.ndarray, grid_a: np.ndarray) -> np.ndarray:
    """
    Single-pass equivalent of warping by G_N then G_A: the residual of G_N
    sampled at G_A(p), added back onto G_A(p). Equals trilinear sampling of G_N
    wherever all neighbours are in bounds, and falls back to G_A outside.
    """
    dims = grid_n.shape[1:]
    residual = grid_n - np.indices(dims, dtype=np.float64)
    out = np.empty_like(grid_a)
    for d in range(3):
        sampled, _ = warp.sample(residual[d], grid_a)
        out[d] = grid_a[d] + sampled
    return out


def effective_grid(phi: GradientField, a: AffineParams) -> DeformationGrid:
    g_n = integrate_gradients(phi)
    g_a = affine_grid(a, phi.dims)
    return DeformationGrid(data=effective_array(g_n.data, g_a.data))


def compose_and_warp(s: Volume3, phi: GradientField, a: AffineParams):
    """
    W(W(S, G_N), G_A).

    :returns: (warped volume, effective single-pass grid G_eff)
    """
    require_same_dims(s, phi, what="volume and gradient field")
    g_n = integrate_gradients(phi)
    g_a = affine_grid(a, s.dims)
    intermediate = warp.warp(s, g_n)
    out = warp.warp(intermediate, g_a)
    return out, DeformationGrid(data=effective_array(g_n.data, g_a.data))
