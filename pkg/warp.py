"""
warp.py
Backward trilinear warping D(p) = sum_q S(q) prod_d max(0, 1 - |G(p)_d - q_d|).
Samples outside [0, n_d - 1] contribute zero. Also provides the analytic
derivative of D(p) with respect to G(p), the adjoint (scatter) of the sampling
operator, and a corner-aligned resampler built on the same kernel.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np

import config
from volume import DeformationGrid, Mask3, Volume3, check_dims, require_same_dims

logger = logging.getLogger(__name__)

_CORNERS = tuple(itertools.product((0, 1), repeat=3))
_MIN_CHUNK = 1 << 15 # voxels per worker below which threading is not worth it

_num_threads = config.THREADS


def set_num_threads(n: int) -> None:
    """Worker count for voxel-parallel sampling. Results do not depend on it."""
    global _num_threads
    _num_threads = max(1, int(n))
    logger.debug(f"sampling threads set to {_num_threads}")


def get_num_threads() -> int:
    return _num_threads


# - - - Kernel - - -

def _stencil(coords: np.ndarray):
    """
    Per-axis lower neighbour index and fractional offset.

    :param coords: (3, M) sampling coordinates in (z, y, x) order
    :returns: base (3, M) int64, frac (3, M) float64
    """
    base = np.floor(coords)
    frac = coords - base
    return base.astype(np.int64), frac


def _sample_chunk(src: np.ndarray, coords: np.ndarray, with_grad: bool, one_sided: bool = False):
    dims = src.shape
    flat_src = src.ravel()
    base, frac = _stencil(coords)
    m = coords.shape[1]

    # per-axis weights / derivative of the hat kernel for the lower (0) and upper (1) corner
    weights = ((1.0 - frac), frac)
    if with_grad:
        # -sign(t) inside the support; at integer coordinates (kink) either 0
        # or the forward difference towards the upper neighbour
        moving = np.ones_like(frac) if one_sided else (frac != 0.0).astype(np.float64)
        dweights = (-moving, moving)

    out = np.zeros(m)
    grad = np.zeros((3, m)) if with_grad else None

    for corner in _CORNERS:
        idx = [base[d] + corner[d] for d in range(3)]
        valid = np.ones(m, dtype=bool)
        for d in range(3):
            valid &= (idx[d] >= 0) & (idx[d] < dims[d])
        flat = np.ravel_multi_index(
            tuple(np.clip(idx[d], 0, dims[d] - 1) for d in range(3)), dims
        )
        val = np.where(valid, flat_src[flat], 0.0)

        wz, wy, wx = (weights[corner[d]][d] for d in range(3))
        out += val * (wz * wy * wx)
        if with_grad:
            dz, dy, dx = (dweights[corner[d]][d] for d in range(3))
            grad[0] += val * (dz * wy * wx)
            grad[1] += val * (wz * dy * wx)
            grad[2] += val * (wz * wy * dx)

    return out, grad


def sample(src: np.ndarray, coords: np.ndarray, with_grad: bool = False, one_sided: bool = False):
    """
    Trilinear sampling of ``src`` at ``coords`` with zero padding.

    :param src: (nz, ny, nx) array
    :param coords: (3, ...) coordinates in voxel units, (z, y, x) order
    :param one_sided: at integer coordinates use the floor-based forward
                      difference instead of the zero subgradient
    :returns: values shaped like ``coords[0]`` and, if ``with_grad``, the
              (3, ...) derivative of each value with respect to its coordinates
    """
    out_shape = coords.shape[1:]
    flat_coords = coords.reshape(3, -1)
    m = flat_coords.shape[1]

    workers = min(_num_threads, max(1, m // _MIN_CHUNK))
    if workers <= 1:
        out, grad = _sample_chunk(src, flat_coords, with_grad, one_sided)
    else:
        # disjoint output slices, so the result is identical for any worker count
        bounds = np.linspace(0, m, workers + 1).astype(int)
        out = np.empty(m)
        grad = np.empty((3, m)) if with_grad else None

        def run(k):
            lo, hi = bounds[k], bounds[k + 1]
            chunk_out, chunk_grad = _sample_chunk(src, flat_coords[:, lo:hi], with_grad, one_sided)
            out[lo:hi] = chunk_out
            if with_grad:
                grad[:, lo:hi] = chunk_grad

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(workers)))

    out = out.reshape(out_shape)
    if with_grad:
        return out, grad.reshape((3,) + out_shape)
    return out, None


def sample_adjoint(coords: np.ndarray, upstream: np.ndarray, dims) -> np.ndarray:
    """
    Transpose of ``sample`` with respect to the source intensities:
    result(q) = sum_p upstream(p) * w(G(p), q).

    Accumulated corner by corner with ``np.bincount`` so the reduction order is fixed.
    """
    dims = tuple(dims)
    flat_coords = coords.reshape(3, -1)
    flat_up = upstream.ravel()
    base, frac = _stencil(flat_coords)
    weights = ((1.0 - frac), frac)
    size = int(np.prod(dims))

    result = np.zeros(size)
    for corner in _CORNERS:
        idx = [base[d] + corner[d] for d in range(3)]
        valid = np.ones(flat_up.shape[0], dtype=bool)
        for d in range(3):
            valid &= (idx[d] >= 0) & (idx[d] < dims[d])
        flat = np.ravel_multi_index(tuple(idx[d][valid] for d in range(3)), dims)
        w = weights[corner[0]][0] * weights[corner[1]][1] * weights[corner[2]][2]
        result += np.bincount(flat, weights=(flat_up * w)[valid], minlength=size)
    return result.reshape(dims)


# - - - Public operations - - -

def warp(s: Volume3, g: DeformationGrid) -> Volume3:
    """D = W(S, G): backward warp of ``s`` under grid ``g``."""
    require_same_dims(s, g, what="volume and grid")
    out, _ = sample(s.data, g.data)
    return Volume3(data=out, spacing=s.spacing)


def warp_with_grad(s: Volume3, g: DeformationGrid, one_sided: bool = False):
    """
    Warp plus per-voxel dD(p)/dG(p)_d. The derivative is 0 at integer
    coordinates unless ``one_sided`` asks for the forward difference there.

    :returns: (warped volume, (3, nz, ny, nx) derivative array in (z, y, x) channel order)
    """
    require_same_dims(s, g, what="volume and grid")
    out, grad = sample(s.data, g.data, with_grad=True, one_sided=one_sided)
    return Volume3(data=out, spacing=s.spacing), grad


def warp_mask(m: Mask3, g: DeformationGrid) -> Mask3:
    """Warp a binary mask as a scalar volume, then threshold at 0.5."""
    require_same_dims(m, g, what="mask and grid")
    out, _ = sample(m.data, g.data)
    return Mask3.from_volume(Volume3(data=out, spacing=m.spacing))


def resample_coords(src_dims, dims) -> np.ndarray:
    """Corner-aligned coordinates mapping a ``dims`` lattice onto ``src_dims``."""
    axes = [
        np.linspace(0.0, src_dims[d] - 1.0, dims[d]) for d in range(3)
    ]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def resample_array(arr: np.ndarray, dims) -> np.ndarray:
    """Trilinear resample of a 3D array onto ``dims`` (first and last samples kept)."""
    dims = check_dims(dims)
    if tuple(arr.shape) == dims:
        return np.array(arr, dtype=np.float64)
    out, _ = sample(arr, resample_coords(arr.shape, dims))
    return out


def resample(v: Volume3, dims) -> Volume3:
    """Resample a volume to new dims; spacing is rescaled to keep the physical extent."""
    dims = check_dims(dims)
    spacing = tuple(
        v.spacing[d] * (v.dims[d] - 1) / (dims[d] - 1) for d in range(3)
    )
    return Volume3(data=resample_array(v.data, dims), spacing=spacing)
