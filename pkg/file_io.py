"""
file_io.py
Read and write volumes, masks, multi-channel fields, affine matrices,
landmarks, configs and reports; intensity preprocessing.

Volume format: raw little-endian float32 payload in z-major, then y, then x
order, plus a JSON sidecar {"dims": [nz, ny, nx], "spacing": [sz, sy, sx],
"dtype": "f32le"}. Multi-channel fields are three volumes named
<prefix>_z.raw, <prefix>_y.raw, <prefix>_x.raw.
"""

import csv
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, Field, ValidationError

import config
import warp
from errors import FormatError, InvalidInputError
from optimizer import OptimConfig
from volume import (
    AffineParams,
    DeformationGrid,
    GradientField,
    Landmark,
    LandmarkSet,
    Mask3,
    Volume3,
)

logger = logging.getLogger(__name__)

DTYPE = "f32le"
CHANNELS = ("z", "y", "x")
LANDMARK_FIELDS = ["label", "z", "y", "x"]


class VolumeHeader(BaseModel):
    dims: List[int] = Field(..., min_length=3, max_length=3)
    spacing: List[float] = Field([1.0, 1.0, 1.0], min_length=3, max_length=3)
    dtype: str = DTYPE


# - - - Helpers - - -

def atomic_write(path, payload: bytes) -> None:
    """Write to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def sidecar_path(path) -> Path:
    path = Path(path)
    if path.suffix == ".raw":
        return path.with_suffix(".json")
    return path.with_name(path.name + ".json")


def channel_path(prefix, axis: str) -> Path:
    prefix = Path(prefix)
    return prefix.with_name(f"{prefix.name}_{axis}.raw")


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2) + "\n").encode("utf-8"))


def write_report(path, report: dict) -> None:
    """Metrics report as indented JSON, written atomically."""
    write_json(path, report)


def read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"malformed JSON in {path}: {e}") from e
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: expected a JSON object, got {type(raw).__name__}")
    return raw


# - - - Volumes - - -

def _read_array(path):
    header_raw = read_json(sidecar_path(path))
    try:
        header = VolumeHeader.model_validate(header_raw)
    except ValidationError as e:
        raise FormatError(f"invalid sidecar for {path}: {e.errors()[0]['loc']} {e.errors()[0]['msg']}") from e
    if header.dtype != DTYPE:
        raise FormatError(f"unsupported dtype '{header.dtype}' in {path}, expected '{DTYPE}'")

    expected = int(np.prod(header.dims))
    size = os.path.getsize(path)
    if size != 4 * expected:
        raise FormatError(f"{path}: payload is {size} bytes, sidecar dims {header.dims} need {4 * expected}")
    payload = np.fromfile(path, dtype="<f4")
    return payload.reshape(header.dims).astype(np.float64), tuple(header.spacing)


def _write_array(path, arr: np.ndarray, spacing) -> None:
    header = {"dims": list(arr.shape), "spacing": [float(s) for s in spacing], "dtype": DTYPE}
    atomic_write(path, np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C"))
    write_json(sidecar_path(path), header)


def read_volume(path) -> Volume3:
    data, spacing = _read_array(path)
    return Volume3(data=data, spacing=spacing)


def write_volume(path, v: Volume3) -> None:
    """Float32 payload; values not representable in float32 are rounded."""
    _write_array(path, v.data, v.spacing)


def read_mask(path) -> Mask3:
    data, spacing = _read_array(path)
    return Mask3(data=data, spacing=spacing)


# - - - Multi-channel fields - - -

def read_channels(prefix) -> np.ndarray:
    channels = [_read_array(channel_path(prefix, axis))[0] for axis in CHANNELS]
    if len({c.shape for c in channels}) != 1:
        raise FormatError(f"channels of {prefix} have different dims")
    return np.stack(channels)


def write_channels(prefix, arr: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    for d, axis in enumerate(CHANNELS):
        _write_array(channel_path(prefix, axis), arr[d], spacing)


def read_grid(prefix) -> DeformationGrid:
    return DeformationGrid(data=read_channels(prefix))


def write_grid(prefix, g: DeformationGrid, spacing=(1.0, 1.0, 1.0)) -> None:
    write_channels(prefix, g.data, spacing)


def read_gradient_field(prefix) -> GradientField:
    return GradientField(data=read_channels(prefix))


def write_affine(path, a: AffineParams) -> None:
    write_json(path, {"affine": a.to_list()})


def read_affine(path) -> AffineParams:
    raw = read_json(path)
    if "affine" not in raw:
        raise FormatError(f"{path} has no 'affine' key")
    return AffineParams(matrix=raw["affine"])


# - - - Landmarks - - -

def read_landmarks(path, dims=None) -> LandmarkSet:
    """
    CSV ``label,z,y,x`` with a header row, voxel coordinates. Points outside
    ``dims`` only trigger a warning here; evaluation rejects them.
    """
    points = []
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or [n.strip() for n in reader.fieldnames] != LANDMARK_FIELDS:
                raise FormatError(f"{path}: expected header {','.join(LANDMARK_FIELDS)}, got {reader.fieldnames}")
            for line, raw_row in enumerate(reader, start=2):
                # header names may carry spaces ("label, z, y, x"); extra cells land under None
                row = {k.strip(): v for k, v in raw_row.items() if k is not None}
                try:
                    coords = {k: float(row[k]) for k in ("z", "y", "x")}
                except (TypeError, ValueError) as e:
                    raise FormatError(f"{path}:{line}: non-numeric coordinate in {row}") from e
                points.append(Landmark(label=(row["label"] or "").strip(), **coords))
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: not UTF-8 text: {e}") from e

    landmarks = LandmarkSet(points=points)
    if dims is not None:
        bad = landmarks.out_of_bounds(dims)
        if bad:
            logger.warning(f"{path}: landmarks outside volume bounds {tuple(dims)}: {bad}")
    return landmarks


def write_landmarks(path, landmarks: LandmarkSet) -> None:
    # repr keeps the shortest string that parses back to the same float
    lines = [",".join(LANDMARK_FIELDS)]
    for p in landmarks.points:
        lines.append(f"{p.label},{p.z!r},{p.y!r},{p.x!r}")
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


# - - - Config - - -

def read_config(path: Optional[str]) -> OptimConfig:
    if path is None:
        return OptimConfig()
    raw = read_json(path)
    return OptimConfig.model_validate(raw)


def write_config(path, cfg: OptimConfig) -> None:
    write_json(path, cfg.model_dump())


# - - - Preprocessing - - -

def preprocess(
    v: Volume3,
    window_lo: float = config.WINDOW_LO,
    window_hi: float = config.WINDOW_HI,
    scale_factor: float = config.SCALE_FACTOR,
) -> Volume3:
    """
    Clamp to [window_lo, window_hi], map linearly to [0, 1], then downscale
    every axis by ``scale_factor`` with trilinear interpolation.
    """
    if not (np.isfinite(window_lo) and np.isfinite(window_hi)) or window_hi <= window_lo:
        raise InvalidInputError(f"invalid intensity window [{window_lo}, {window_hi}]")
    if not (0.0 < scale_factor <= 1.0):
        raise InvalidInputError(f"scale factor must lie in (0, 1], got {scale_factor}")

    windowed = (np.clip(v.data, window_lo, window_hi) - window_lo) / (window_hi - window_lo)
    windowed = Volume3(data=windowed, spacing=v.spacing)
    if scale_factor == 1.0:
        return windowed
    dims = tuple(max(2, int(round(n * scale_factor))) for n in v.dims)
    return warp.resample(windowed, dims)
