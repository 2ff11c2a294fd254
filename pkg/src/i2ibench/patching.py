"""Patch extraction, sliding-window tiling and Gaussian-blended stitching.

Every model in the benchmark sees the volume through the same machinery:
foreground-guided random patches at training time, a deterministic
sliding-window grid at inference time, and overlap blending with a
separable Gaussian importance map so patch borders leave no seams.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .preprocess import PreprocessedPair
from .volume import Mask, ParameterError, ShapeError

DEFAULT_PATCH = (96, 96, 96)
DEFAULT_OVERLAP = 0.625
DEFAULT_SIGMA_SCALE = 0.125
WEIGHT_EPS = 1e-8


class NoForegroundError(ValueError):
    pass


class IncompleteCoverageError(ValueError):
    pass


@dataclass(frozen=True)
class PatchGrid:
    """Sliding-window tiling plan over a padded volume."""

    patch_size: tuple[int, int, int]
    overlap: float
    dims: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...]

    def to_json(self) -> str:
        return json.dumps(
            {"patch_size": list(self.patch_size), "overlap": self.overlap,
             "dims": list(self.dims), "origins": [list(o) for o in self.origins]},
            sort_keys=True)


@dataclass(frozen=True)
class ImportanceMap:
    """Patch-shaped blending weights, peak 1.0 at the patch center."""

    weights: np.ndarray
    sigma_scale: float

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)


def _axis_positions(dim: int, patch: int, step: int) -> list[int]:
    if step < 1:
        step = 1
    n_steps = int(math.ceil((dim - patch) / step)) if dim > patch else 0
    positions = [min(i * step, dim - patch) for i in range(n_steps + 1)]
    # clamping can duplicate the final origin
    out = []
    for p in positions:
        if not out or p != out[-1]:
            out.append(p)
    return out


def build_patch_grid(dims, patch=DEFAULT_PATCH, overlap=DEFAULT_OVERLAP) -> PatchGrid:
    """Tile ``dims`` with patches at the given overlap fraction.

    Step is ``round(patch * (1 - overlap))`` per axis (36 voxels for the
    default 96 / 0.625); the final window is clamped so it ends exactly at
    the volume boundary. Origins come out lexicographically sorted.
    """
    dims = tuple(int(d) for d in dims)
    patch = tuple(int(p) for p in patch)
    if not 0 <= overlap < 1:
        raise ParameterError(f"overlap must be in [0, 1), got {overlap}")
    if any(d < p for d, p in zip(dims, patch)):
        raise ShapeError(f"volume dims {dims} smaller than patch {patch}")
    per_axis = [
        _axis_positions(d, p, int(round(p * (1.0 - overlap))))
        for d, p in zip(dims, patch)
    ]
    origins = tuple(
        (x, y, z) for x in per_axis[0] for y in per_axis[1] for z in per_axis[2]
    )
    return PatchGrid(patch_size=patch, overlap=float(overlap), dims=dims, origins=origins)


def gaussian_importance(patch=DEFAULT_PATCH, sigma_scale=DEFAULT_SIGMA_SCALE) -> ImportanceMap:
    """Separable Gaussian weights, sigma = sigma_scale * extent per axis.

    The center voxel (index ``size // 2``) carries weight exactly 1.0;
    weights are floored at a small epsilon so stitching denominators stay
    strictly positive.
    """
    if sigma_scale <= 0:
        raise ParameterError("sigma_scale must be > 0")
    axes = []
    for size in patch:
        center = size // 2
        sigma = sigma_scale * size
        x = np.arange(size, dtype=np.float64)
        axes.append(np.exp(-0.5 * ((x - center) / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return ImportanceMap(weights=np.maximum(w, WEIGHT_EPS), sigma_scale=float(sigma_scale))


def extract_patch(data: np.ndarray, origin, patch) -> np.ndarray:
    x, y, z = origin
    px, py, pz = patch
    return data[x : x + px, y : y + py, z : z + pz]


def sample_training_patches(pair: PreprocessedPair, fg: Mask, n: int, seed: int):
    """Draw n source/target patch pairs centered on foreground voxels.

    Patch centers are sampled uniformly over the foreground; windows are
    clamped inside the volume, and source/target are cut at identical
    offsets. Deterministic under the seed.
    """
    patch = DEFAULT_PATCH
    dims = pair.source.dims
    if any(d < p for d, p in zip(dims, patch)):
        raise ShapeError(f"volume dims {dims} smaller than patch {patch}")
    centers = draw_patch_centers(fg, n, seed)
    out = []
    for center in centers:
        origin = tuple(
            int(min(max(c - p // 2, 0), d - p)) for c, p, d in zip(center, patch, dims)
        )
        out.append(
            (
                extract_patch(pair.source.data, origin, patch).copy(),
                extract_patch(pair.target.data, origin, patch).copy(),
            )
        )
    return out


def draw_patch_centers(fg: Mask, n: int, seed: int):
    """Uniform draws (with replacement) of foreground voxel coordinates."""
    if fg.is_empty:
        raise NoForegroundError("foreground mask is empty; cannot place patch centers")
    flat = np.flatnonzero(fg.data)
    rng = np.random.Generator(np.random.PCG64(seed))
    picks = flat[rng.integers(0, flat.size, size=n)]
    return [tuple(int(v) for v in np.unravel_index(p, fg.dims)) for p in picks]


def stitch(patch_outputs, grid: PatchGrid, imap: ImportanceMap, out_dims) -> np.ndarray:
    """Blend patch predictions into a full volume.

    out(v) = sum_p w_p(v) * patch_p(v) / sum_p w_p(v), accumulated in
    float64 in canonical (lexicographic origin) order so the result is
    bit-identical regardless of how the patches were produced.
    """
    out_dims = tuple(int(d) for d in out_dims)
    provided = {tuple(origin): np.asarray(p) for origin, p in patch_outputs}
    missing = [o for o in grid.origins if o not in provided]
    if missing:
        raise IncompleteCoverageError(f"missing {len(missing)} grid origins, first {missing[0]}")
    extra = set(provided) - set(grid.origins)
    if extra:
        raise IncompleteCoverageError(f"outputs at origins not in grid: {sorted(extra)[:3]}")

    num = np.zeros(out_dims, dtype=np.float64)
    den = np.zeros(out_dims, dtype=np.float64)
    w = imap.weights
    px, py, pz = grid.patch_size
    for origin in sorted(grid.origins):
        patch = provided[origin]
        if patch.shape != (px, py, pz):
            raise ShapeError(f"patch at {origin} has shape {patch.shape}, expected {(px, py, pz)}")
        x, y, z = origin
        sl = (slice(x, x + px), slice(y, y + py), slice(z, z + pz))
        num[sl] += w * patch.astype(np.float64)
        den[sl] += w
    if not (den > 0).all():
        raise IncompleteCoverageError("some voxels are covered by no patch")
    return (num / den).astype(np.float32)
