"""Volumetric data model: scalar grids with physical geometry.

A :class:`Volume` is a 3D scalar grid (32-bit float voxels, x-fastest
ordering at I/O boundaries) together with voxel spacing in mm, a world
origin, an orthonormal direction matrix and a modality tag. Volumes are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage


class ShapeError(ValueError):
    """Grid dimensions violate an operation's requirements."""


class ParameterError(ValueError):
    """A scalar parameter is out of its legal range."""


class CardinalityError(ValueError):
    """Too few (or zero) elements to perform an aggregate operation."""


class ConfigurationError(ValueError):
    """Required configuration (records, keys, parameters) is missing or inconsistent."""


class Modality(str, enum.Enum):
    CT = "CT"
    CBCT = "CBCT"
    MRI_T1W = "MRI_T1w"
    MRI_T2W = "MRI_T2w"
    MRI_T2F = "MRI_T2f"
    PET = "PET"

    @property
    def is_mri(self) -> bool:
        return self in (Modality.MRI_T1W, Modality.MRI_T2W, Modality.MRI_T2F)


_DIRECTION_TOL = 1e-6


def _as_readonly(a: np.ndarray, dtype) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=dtype)
    if out is a:
        out = out.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Volume:
    """3D scalar image with physical geometry.

    ``data`` is indexed ``[x, y, z]`` with shape ``dims``; the flat file
    representation is x-fastest (NIfTI native, ``ravel(order="F")``).
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))
    modality: Modality = Modality.CT

    def __post_init__(self):
        data = _as_readonly(self.data, np.float32)
        object.__setattr__(self, "data", data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume data must be 3D with positive dims, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ParameterError(f"spacing components must be > 0, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        direction = _as_readonly(np.asarray(self.direction, dtype=np.float64), np.float64)
        if direction.shape != (3, 3):
            raise ShapeError("direction must be a 3x3 matrix")
        err = np.abs(direction @ direction.T - np.eye(3)).max()
        if err >= _DIRECTION_TOL:
            raise ParameterError(f"direction matrix not orthonormal (|D.D^T - I|_inf = {err:.3g})")
        object.__setattr__(self, "direction", direction)
        if not isinstance(self.modality, Modality):
            object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def voxel_count(self) -> int:
        return int(self.data.size)

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same geometry and modality, new voxel field."""
        if tuple(data.shape) != self.dims:
            raise ShapeError(f"replacement data shape {data.shape} != {self.dims}")
        return replace(self, data=data)

    def like(self, data: np.ndarray, spacing=None, origin=None) -> "Volume":
        return Volume(
            data=data,
            spacing=self.spacing if spacing is None else spacing,
            origin=self.origin if origin is None else origin,
            direction=self.direction,
            modality=self.modality,
        )


@dataclass(frozen=True)
class Mask:
    """Boolean voxel map companion to a Volume (same dims, same ordering)."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_readonly(self.data, bool))
        if self.data.ndim != 3:
            raise ShapeError(f"mask must be 3D, got shape {self.data.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def count(self) -> int:
        return int(self.data.sum())

    @property
    def is_empty(self) -> bool:
        return not bool(self.data.any())

    @classmethod
    def full(cls, dims) -> "Mask":
        return cls(np.ones(dims, dtype=bool))

    @classmethod
    def empty(cls, dims) -> "Mask":
        return cls(np.zeros(dims, dtype=bool))


class FillRule(str, enum.Enum):
    FOREGROUND_MIN = "foreground-min"
    ZERO = "zero"


@dataclass(frozen=True)
class ModalityRange:
    """Per-modality intensity clipping bounds and background fill rule."""

    modality: Modality
    clip_low: float = -math.inf
    clip_high: float = math.inf
    fill_rule: FillRule = FillRule.FOREGROUND_MIN

    def __post_init__(self):
        if math.isfinite(self.clip_low) and math.isfinite(self.clip_high):
            if not self.clip_low < self.clip_high:
                raise ParameterError(f"clip_low {self.clip_low} must be < clip_high {self.clip_high}")


def default_range(modality: Modality) -> ModalityRange:
    """Clipping defaults: CT/CBCT [-1024, 3000] HU, PET [0, 20] SUV, MRI unclipped."""
    modality = Modality(modality)
    if modality in (Modality.CT, Modality.CBCT):
        return ModalityRange(modality, -1024.0, 3000.0, FillRule.FOREGROUND_MIN)
    if modality is Modality.PET:
        return ModalityRange(modality, 0.0, 20.0, FillRule.FOREGROUND_MIN)
    return ModalityRange(modality, -math.inf, math.inf, FillRule.ZERO)


def resample_trilinear(vol: Volume, target_spacing, fill: float = 0.0) -> Volume:
    """Resample onto target voxel spacing with trilinear interpolation.

    Output dims are ``ceil(dim * spacing / target_spacing)`` so the field
    of view is never truncated; the world origin is preserved. Sample
    positions outside the source grid receive ``fill``.
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target_spacing):
        raise ParameterError(f"target spacing must be > 0, got {target_spacing}")
    out_dims = tuple(
        int(math.ceil(n * s / t)) for n, s, t in zip(vol.dims, vol.spacing, target_spacing)
    )
    return _resample_to_grid(vol, out_dims, target_spacing, fill)


def _resample_to_grid(vol: Volume, out_dims, out_spacing, fill: float) -> Volume:
    """Trilinear sampling of ``vol`` on an explicit output grid (shared origin)."""
    axes = [
        np.arange(n, dtype=np.float64) * t / s
        for n, s, t in zip(out_dims, vol.spacing, out_spacing)
    ]
    coords = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(
        vol.data.astype(np.float64),
        np.stack(coords),
        order=1,
        mode="constant",
        cval=float(fill),
    )
    return Volume(
        data=out.astype(np.float32),
        spacing=tuple(out_spacing),
        origin=vol.origin,
        direction=vol.direction,
        modality=vol.modality,
    )
