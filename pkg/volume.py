"""
volume.py
Dense array types for volumes, masks, grids, gradient fields, affine matrices
and landmarks. Axis order is (z, y, x) everywhere; grid coordinates are
0-based voxel indices of the source frame, spacing is metadata only.
"""

from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import InvalidInputError, LandmarkError, ShapeMismatchError

Dims = Tuple[int, int, int]


def check_dims(dims) -> Dims:
    """Validate a (nz, ny, nx) triple; trilinear sampling needs two samples per axis."""
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3:
        raise InvalidInputError(f"dims must have 3 entries, got {dims}")
    if min(dims) < 2:
        raise InvalidInputError(f"all dims must be >= 2, got {dims}")
    return dims # type: ignore


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


# - - - Base - - -

class ArrayModel(BaseModel):
    """Frozen model around a float64 numpy array (copied and made read-only)."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray = Field(..., description="Voxel values, (z, y, x) axis order")

    @field_validator("data", mode="before")
    @classmethod
    def as_float_array(cls, value):
        return _frozen(np.array(value, dtype=np.float64))

    def _check_finite(self, what: str) -> None:
        if not np.isfinite(self.data).all():
            raise InvalidInputError(f"{what} contains non-finite values")


class ChannelField(ArrayModel):
    """Three channels stacked as (3, nz, ny, nx), channel order (z, y, x)."""

    @model_validator(mode="after")
    def validate_channels(self):
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise InvalidInputError(f"expected (3, nz, ny, nx) channels, got {self.data.shape}")
        check_dims(self.data.shape[1:])
        return self

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape[1:]) # type: ignore

    @property
    def gz(self) -> np.ndarray:
        return self.data[0]

    @property
    def gy(self) -> np.ndarray:
        return self.data[1]

    @property
    def gx(self) -> np.ndarray:
        return self.data[2]


# - - - Volumes - - -

class Volume3(ArrayModel):
    spacing: Tuple[float, float, float] = Field((1.0, 1.0, 1.0), description="Physical size of a voxel (sz, sy, sx), metadata only")

    @model_validator(mode="after")
    def validate_volume(self):
        if self.data.ndim != 3:
            raise InvalidInputError(f"volume must be 3D, got shape {self.data.shape}")
        check_dims(self.data.shape)
        self._check_finite("volume")
        if not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise InvalidInputError(f"spacing must be positive and finite, got {self.spacing}")
        return self

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape) # type: ignore


class Mask3(Volume3):
    """Binary mask stored as a scalar volume so it can go through the warp kernel."""

    @model_validator(mode="after")
    def validate_binary(self):
        if not np.isin(self.data, (0.0, 1.0)).all():
            raise InvalidInputError("mask values must be 0 or 1")
        return self

    @classmethod
    def from_volume(cls, v: Volume3, threshold: float = 0.5) -> "Mask3":
        return cls(data=(v.data >= threshold).astype(np.float64), spacing=v.spacing)

    @property
    def count(self) -> int:
        return int(self.data.sum())


# - - - Transformation parameters - - -

class GradientField(ChannelField):
    """Per-axis ratios between consecutive sampling coordinates, Phi in (0, 2)."""

    @model_validator(mode="after")
    def validate_range(self):
        self._check_finite("gradient field")
        if not ((self.data > 0.0) & (self.data < 2.0)).all():
            raise InvalidInputError("gradient field values must lie strictly in (0, 2)")
        return self

    @classmethod
    def identity(cls, dims) -> "GradientField":
        return cls(data=np.ones((3,) + check_dims(dims)))


class DeformationGrid(ChannelField):
    """Per-voxel sampling coordinates in the source frame."""

    @model_validator(mode="after")
    def validate_coords(self):
        self._check_finite("deformation grid")
        return self


class AffineParams(BaseModel):
    """3 x 4 matrix acting on augmented normalized coordinates [z, y, x, 1]."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    matrix: np.ndarray = Field(..., description="Rows and columns in (z, y, x) order, last column is the translation")

    @field_validator("matrix", mode="before")
    @classmethod
    def as_matrix(cls, value):
        return _frozen(np.array(value, dtype=np.float64))

    @model_validator(mode="after")
    def validate_matrix(self):
        if self.matrix.shape != (3, 4):
            raise InvalidInputError(f"affine matrix must be 3x4, got {self.matrix.shape}")
        if not np.isfinite(self.matrix).all():
            raise InvalidInputError("affine matrix contains non-finite values")
        return self

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(matrix=IDENTITY_AFFINE)

    def to_list(self) -> List[List[float]]:
        return self.matrix.tolist()


IDENTITY_AFFINE = _frozen(np.hstack([np.eye(3), np.zeros((3, 1))]))


# - - - Landmarks - - -

class Landmark(BaseModel):
    model_config = ConfigDict(frozen=True)

    label: str = Field(..., description="Unique landmark name")
    z: float
    y: float
    x: float

    @model_validator(mode="after")
    def validate_coords(self):
        if not all(np.isfinite(c) for c in (self.z, self.y, self.x)):
            raise InvalidInputError(f"landmark {self.label} has non-finite coordinates")
        return self

    @property
    def coords(self) -> np.ndarray:
        return np.array([self.z, self.y, self.x])


class LandmarkSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    points: List[Landmark] = Field(default_factory=list, description="Points in voxel coordinates of one volume")

    @model_validator(mode="after")
    def validate_unique(self):
        labels = [p.label for p in self.points]
        if len(set(labels)) != len(labels):
            dupes = sorted({l for l in labels if labels.count(l) > 1})
            raise LandmarkError(f"duplicate landmark labels: {dupes}")
        return self

    def __len__(self) -> int:
        return len(self.points)

    @property
    def labels(self) -> List[str]:
        return [p.label for p in self.points]

    def by_label(self) -> dict:
        return {p.label: p for p in self.points}

    def coords(self) -> np.ndarray:
        """(K, 3) array of (z, y, x) coordinates."""
        if not self.points:
            return np.zeros((0, 3))
        return np.stack([p.coords for p in self.points])

    def out_of_bounds(self, dims) -> List[str]:
        hi = np.array(dims, dtype=np.float64) - 1.0
        return [p.label for p in self.points if np.any(p.coords < 0.0) or np.any(p.coords > hi)]

    def check_bounds(self, dims) -> None:
        bad = self.out_of_bounds(dims)
        if bad:
            raise LandmarkError(f"landmarks outside volume bounds {tuple(dims)}: {bad}")


# - - - Constructors - - -

def new_volume(dims, spacing=(1.0, 1.0, 1.0), fill: float = 0.0) -> Volume3:
    """Volume of the given shape with every voxel set to ``fill``."""
    dims = check_dims(dims)
    if not np.isfinite(fill):
        raise InvalidInputError(f"fill value must be finite, got {fill}")
    return Volume3(data=np.full(dims, float(fill)), spacing=tuple(spacing))


def identity_grid(dims) -> DeformationGrid:
    """G_I: every voxel samples its own location."""
    return DeformationGrid(data=np.indices(check_dims(dims), dtype=np.float64))


def residual_deformation(g: DeformationGrid) -> DeformationGrid:
    """Displacement field G - G_I. Not a sampling grid: monotonicity is not implied."""
    return DeformationGrid(data=g.data - np.indices(g.dims, dtype=np.float64))


def require_same_dims(*items, what: str = "inputs") -> Dims:
    """Shared dims of volumes / fields, or ShapeMismatchError."""
    dims = [tuple(item.dims) for item in items]
    for d in dims[1:]:
        if d != dims[0]:
            raise ShapeMismatchError(f"{what} have different dims: {dims[0]} vs {d}")
    return dims[0] # type: ignore
