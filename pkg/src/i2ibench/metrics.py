"""Whole-volume and lesion-level image-quality metrics.

PSNR, SSIM and NMSE accept Volumes or bare arrays; math runs in float64.
SSIM uses a 7^3 Gaussian window (sigma 1.5) and averages over the valid
region where the window is fully supported, which keeps the brute-force
definition and the fast separable implementation in exact agreement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import CardinalityError, Mask, Modality, ParameterError, ShapeError, Volume

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
CT_DATA_RANGE = 4024.0  # clip width: 3000 - (-1024)
PET_DATA_RANGE = 20.0


class DegenerateReferenceError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    if isinstance(x, Volume):
        return x.data.astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def data_range_for(modality: Modality, ref) -> float:
    """Paper-grounded ranges: clip widths for CT/CBCT and PET, min-max for MRI."""
    modality = Modality(modality)
    if modality in (Modality.CT, Modality.CBCT):
        return CT_DATA_RANGE
    if modality is Modality.PET:
        return PET_DATA_RANGE
    ref = _as_array(ref)
    return float(ref.max() - ref.min())


def psnr(pred, ref, data_range: float, mask=None) -> float:
    """10 log10(range^2 / MSE); +inf when the volumes agree exactly."""
    pred, ref = _as_array(pred), _as_array(ref)
    if pred.shape != ref.shape:
        raise ShapeError(f"pred shape {pred.shape} != ref shape {ref.shape}")
    if data_range <= 0:
        raise ParameterError("data_range must be > 0")
    diff = pred - ref
    if mask is not None:
        m = mask.data if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
        diff = diff[m]
        if diff.size == 0:
            raise ParameterError("mask selects no voxels")
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian_kernel1d(window: int, sigma: float) -> np.ndarray:
    half = window // 2
    x = np.arange(window, dtype=np.float64) - half
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _local_mean(a: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    for axis in range(a.ndim):
        a = ndimage.correlate1d(a, kernel, axis=axis, mode="nearest")
    return a


def ssim3d(pred, ref, data_range: float, mask=None,
           window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean structural similarity with a separable 3D Gaussian window.

    Local moments are Gaussian-weighted; the mean runs over voxels whose
    window lies fully inside the volume (and inside ``mask`` if given).
    """
    pred, ref = _as_array(pred), _as_array(ref)
    if pred.shape != ref.shape:
        raise ShapeError(f"pred shape {pred.shape} != ref shape {ref.shape}")
    if any(n < window for n in pred.shape):
        raise ShapeError(f"volume dims {pred.shape} smaller than SSIM window {window}")
    if data_range <= 0:
        raise ParameterError("data_range must be > 0")

    kernel = _gaussian_kernel1d(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x = _local_mean(pred, kernel)
    mu_y = _local_mean(ref, kernel)
    xx = _local_mean(pred * pred, kernel) - mu_x * mu_x
    yy = _local_mean(ref * ref, kernel) - mu_y * mu_y
    xy = _local_mean(pred * ref, kernel) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    )

    half = window // 2
    valid = tuple(slice(half, n - half) for n in pred.shape)
    ssim_map = ssim_map[valid]
    if mask is not None:
        m = mask.data if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
        m = m[valid]
        if not m.any():
            raise ParameterError("mask selects no voxels in the valid SSIM region")
        return float(ssim_map[m].mean())
    return float(ssim_map.mean())


def nmse(pred, ref) -> float:
    """Normalized mean squared error: sum((pred-ref)^2) / sum(ref^2)."""
    pred, ref = _as_array(pred), _as_array(ref)
    if pred.shape != ref.shape:
        raise ShapeError(f"pred shape {pred.shape} != ref shape {ref.shape}")
    denom = float(np.sum(ref * ref))
    if denom == 0.0:
        raise DegenerateReferenceError("reference volume has zero energy")
    return float(np.sum((pred - ref) ** 2) / denom)


def error_map(pred: Volume, ref: Volume) -> Volume:
    """Voxelwise pred - ref with the prediction's geometry."""
    if pred.dims != ref.dims:
        raise ShapeError(f"pred dims {pred.dims} != ref dims {ref.dims}")
    return pred.with_data(pred.data.astype(np.float64) - ref.data.astype(np.float64))


@dataclass
class LesionRecord:
    lesion_id: int
    voxel_count: int
    equivalent_diameter_mm: float
    psnr_dB: float
    ssim: float
    size_group: str | None = None


def equivalent_diameter(voxel_count: int, spacing) -> float:
    volume_mm3 = voxel_count * spacing[0] * spacing[1] * spacing[2]
    return 2.0 * (3.0 * volume_mm3 / (4.0 * math.pi)) ** (1.0 / 3.0)


def lesion_analysis(pred, ref, lesion_mask: Mask, spacing, data_range: float):
    """Per-lesion metrics over connected components (26-connectivity).

    Metrics are computed in the lesion's one-voxel-dilated bounding box,
    further expanded (clamped to the volume) to the SSIM window so even
    single-voxel lesions can be scored.
    """
    pred, ref = _as_array(pred), _as_array(ref)
    labels, n = ndimage.label(lesion_mask.data, structure=np.ones((3, 3, 3), dtype=bool))
    records: list[LesionRecord] = []
    for lesion_id in range(1, n + 1):
        region = labels == lesion_id
        count = int(region.sum())
        box = _metric_box(region, pred.shape)
        records.append(
            LesionRecord(
                lesion_id=lesion_id,
                voxel_count=count,
                equivalent_diameter_mm=equivalent_diameter(count, spacing),
                psnr_dB=psnr(pred[box], ref[box], data_range),
                ssim=ssim3d(pred[box], ref[box], data_range),
            )
        )
    return records


def _metric_box(region: np.ndarray, shape):
    idx = np.nonzero(region)
    box = []
    for axis in range(3):
        lo = int(idx[axis].min()) - 1
        hi = int(idx[axis].max()) + 2
        short = SSIM_WINDOW - (hi - lo)
        if short > 0:
            lo -= short // 2
            hi += short - short // 2
        lo = max(lo, 0)
        hi = min(hi, shape[axis])
        if hi - lo < SSIM_WINDOW:  # clamped against a face: slide the window inward
            if lo == 0:
                hi = min(SSIM_WINDOW, shape[axis])
            else:
                lo = max(hi - SSIM_WINDOW, 0)
        box.append(slice(lo, hi))
    return tuple(box)


def assign_size_groups(records: list[LesionRecord]) -> list[LesionRecord]:
    """Label lesions small/medium/large by dataset-level diameter tertiles."""
    if not records:
        return records
    d = np.array([r.equivalent_diameter_mm for r in records])
    t1, t2 = np.percentile(d, [100.0 / 3.0, 200.0 / 3.0])
    for r in records:
        if r.equivalent_diameter_mm <= t1:
            r.size_group = "small"
        elif r.equivalent_diameter_mm <= t2:
            r.size_group = "medium"
        else:
            r.size_group = "large"
    return records


@dataclass
class MetricSummary:
    mean: float
    std: float
    median: float
    iqr: float
    n: int
    n_excluded: int


def summarize_values(values) -> MetricSummary:
    """Mean, population std, median and IQR; non-finite sentinels excluded."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise CardinalityError("cannot summarize zero rows")
    finite = values[np.isfinite(values)]
    n_excluded = int(values.size - finite.size)
    if finite.size == 0:
        return MetricSummary(math.nan, math.nan, math.nan, math.nan, 0, n_excluded)
    q25, q75 = np.percentile(finite, [25.0, 75.0])
    return MetricSummary(
        mean=float(finite.mean()),
        std=float(finite.std()),
        median=float(np.median(finite)),
        iqr=float(q75 - q25),
        n=int(finite.size),
        n_excluded=n_excluded,
    )


@dataclass
class SubjectMetrics:
    subject_id: str
    psnr_dB: float
    ssim: float
    nmse: float


def summarize(rows: list[SubjectMetrics]) -> dict[str, MetricSummary]:
    if not rows:
        raise CardinalityError("cannot summarize zero rows")
    return {
        "psnr_dB": summarize_values([r.psnr_dB for r in rows]),
        "ssim": summarize_values([r.ssim for r in rows]),
        "nmse": summarize_values([r.nmse for r in rows]),
    }
