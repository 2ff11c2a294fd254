"""Invertible preprocessing pipeline.

Eight fixed steps per volume pair: body masking, voxel resampling,
intensity clipping, normalization, spatial padding, foreground mask
computation, mask intersection, then patch extraction (which lives in
:mod:`i2ibench.patching`). Every applied step records its parameters so a
prediction can be mapped back to the original image space; clipping and
body masking destroy information and are deliberately not undone, so the
inversion restores geometry and intensity scale only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .volume import (
    FillRule,
    Mask,
    Modality,
    ModalityRange,
    ParameterError,
    ShapeError,
    Volume,
    _resample_to_grid,
    default_range,
)


class DegenerateMaskError(ValueError):
    pass


class DegenerateNormalizationError(ValueError):
    pass


class CorruptedRecordError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


@dataclass
class TransformStep:
    kind: str
    params: dict


@dataclass
class TransformRecord:
    """Ordered, replayable log of the preprocessing steps applied to one volume."""

    steps: list[TransformStep] = field(default_factory=list)

    def add(self, kind: str, **params) -> None:
        self.steps.append(TransformStep(kind, params))

    def find(self, kind: str) -> TransformStep | None:
        for step in self.steps:
            if step.kind == kind:
                return step
        return None

    def to_json(self) -> str:
        doc = {"version": 1, "steps": [{"kind": s.kind, "params": s.params} for s in self.steps]}
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TransformRecord":
        doc = json.loads(text)
        steps = [TransformStep(s["kind"], dict(s["params"])) for s in doc["steps"]]
        return cls(steps)

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")

    @classmethod
    def load(cls, path) -> "TransformRecord":
        with open(path) as f:
            return cls.from_json(f.read())


@dataclass
class PipelineConfig:
    target_spacing: tuple[float, float, float]
    source_threshold: float = 0.1
    target_threshold: float = 0.01
    source_range: ModalityRange | None = None
    target_range: ModalityRange | None = None
    pad_multiple: int = 96

    def __post_init__(self):
        if self.pad_multiple < 1:
            raise ParameterError("pad_multiple must be >= 1")
        for t in (self.source_threshold, self.target_threshold):
            if not math.isfinite(t):
                raise ParameterError("foreground thresholds must be finite")


@dataclass
class PreprocessedPair:
    source: Volume
    target: Volume


def modality_fill(vol: Volume, region: np.ndarray | None = None) -> float:
    """Background fill value: foreground minimum for CT/CBCT/PET, zero for MRI."""
    rule = default_range(vol.modality).fill_rule
    if rule is FillRule.ZERO:
        return 0.0
    values = vol.data if region is None else vol.data[region]
    return float(values.min())


def apply_body_mask(vol: Volume, body: Mask):
    """Replace voxels outside the body with the modality fill value."""
    if body.dims != vol.dims:
        raise ShapeError(f"body mask dims {body.dims} != volume dims {vol.dims}")
    if body.is_empty:
        raise DegenerateMaskError("body mask selects no voxels")
    fill = modality_fill(vol, body.data)
    data = vol.data.copy()
    data[~body.data] = fill
    return vol.with_data(data), TransformStep("body-mask", {"fill": fill})


def resample_step(vol: Volume, target_spacing, fill: float):
    out = _resample_to_grid(
        vol,
        tuple(int(math.ceil(n * s / t)) for n, s, t in zip(vol.dims, vol.spacing, target_spacing)),
        tuple(float(t) for t in target_spacing),
        fill,
    )
    step = TransformStep(
        "resample",
        {
            "from_dims": list(vol.dims),
            "from_spacing": list(vol.spacing),
            "from_origin": list(vol.origin),
            "to_spacing": [float(t) for t in target_spacing],
            "fill": float(fill),
        },
    )
    return out, step


def clip_intensities(vol: Volume, range_: ModalityRange):
    """Clip to the modality range; MRI (or unbounded ranges) pass through."""
    if range_.modality != vol.modality:
        raise ParameterError(
            f"range is for {range_.modality.value}, volume is {vol.modality.value}"
        )
    if vol.modality.is_mri or not (
        math.isfinite(range_.clip_low) or math.isfinite(range_.clip_high)
    ):
        return vol, None
    data = np.clip(vol.data, range_.clip_low, range_.clip_high)
    step = TransformStep("clip", {"low": float(range_.clip_low), "high": float(range_.clip_high)})
    return vol.with_data(data), step


def normalize(vol: Volume):
    """Rescale to zero mean, unit (population) variance; records (mean, std)."""
    data64 = vol.data.astype(np.float64)
    mean = float(data64.mean())
    std = float(data64.std())
    if std == 0.0:
        raise DegenerateNormalizationError("constant volume cannot be normalized")
    out = ((data64 - mean) / std).astype(np.float32)
    return vol.with_data(out), TransformStep("normalize", {"mean": mean, "std": std})


def pad_to_multiple(vol: Volume, multiple: int, fill: float):
    """Pad each axis to the next multiple; odd remainders put the extra voxel high."""
    if multiple < 1:
        raise ParameterError("pad multiple must be >= 1")
    lo, hi = [], []
    for n in vol.dims:
        total = max(int(math.ceil(n / multiple)) * multiple, multiple) - n
        lo.append(total // 2)
        hi.append(total - total // 2)
    if not any(lo) and not any(hi):
        step = TransformStep("pad", {"lo": [0, 0, 0], "hi": [0, 0, 0],
                                     "origin": list(vol.origin), "fill": float(fill)})
        return vol, step
    data = np.pad(vol.data, list(zip(lo, hi)), mode="constant", constant_values=np.float32(fill))
    shift = vol.direction @ (np.asarray(vol.spacing) * np.asarray(lo, dtype=np.float64))
    origin = tuple(np.asarray(vol.origin) - shift)
    step = TransformStep("pad", {"lo": lo, "hi": hi, "origin": list(vol.origin),
                                 "fill": float(fill)})
    return Volume(data, vol.spacing, origin, vol.direction, vol.modality), step


def foreground_mask(vol: Volume, threshold: float) -> Mask:
    """Voxels strictly above the threshold (intended for normalized volumes)."""
    return Mask(vol.data > np.float32(threshold))


def intersect_masks(a: Mask, b: Mask) -> Mask:
    if a.dims != b.dims:
        raise ShapeError(f"mask dims differ: {a.dims} vs {b.dims}")
    return Mask(a.data & b.data)


def _clear_padding(mask: Mask, lo, hi) -> Mask:
    data = mask.data.copy()
    for axis, (l, h) in enumerate(zip(lo, hi)):
        if l:
            data[tuple(slice(0, l) if ax == axis else slice(None) for ax in range(3))] = False
        if h:
            data[tuple(slice(-h, None) if ax == axis else slice(None) for ax in range(3))] = False
    return Mask(data)


def _preprocess_one(vol: Volume, body: Mask | None, range_: ModalityRange,
                    threshold: float, cfg: PipelineConfig):
    record = TransformRecord()
    if body is not None:
        fill = modality_fill(vol, body.data)
        vol, step = apply_body_mask(vol, body)
        record.steps.append(step)
    else:
        fill = modality_fill(vol)

    vol, step = resample_step(vol, cfg.target_spacing, fill)
    record.steps.append(step)

    vol, clip = clip_intensities(vol, range_)
    if clip is not None:
        record.steps.append(clip)
        fill = min(max(fill, range_.clip_low), range_.clip_high)

    vol, norm = normalize(vol)
    record.steps.append(norm)
    fill_norm = (fill - norm.params["mean"]) / norm.params["std"]

    vol, pad = pad_to_multiple(vol, cfg.pad_multiple, fill_norm)
    record.steps.append(pad)

    fg = foreground_mask(vol, threshold)
    fg = _clear_padding(fg, pad.params["lo"], pad.params["hi"])
    return vol, record, fg


def run_pipeline(source: Volume, target: Volume, body: Mask | None, cfg: PipelineConfig):
    """Run the full pipeline on a co-registered pair.

    Returns (PreprocessedPair, source record, target record, intersected
    foreground mask). Both volumes must land on identical grids after
    resampling; dataset providers co-register pairs on one grid.
    """
    src_range = cfg.source_range or default_range(source.modality)
    tgt_range = cfg.target_range or default_range(target.modality)
    src, rec_src, fg_src = _preprocess_one(source, body, src_range, cfg.source_threshold, cfg)
    tgt, rec_tgt, fg_tgt = _preprocess_one(target, body, tgt_range, cfg.target_threshold, cfg)
    if src.dims != tgt.dims:
        raise PipelineError(
            f"source and target disagree after resampling: {src.dims} vs {tgt.dims}; "
            "inputs must share one world grid"
        )
    fg = intersect_masks(fg_src, fg_tgt)
    return PreprocessedPair(src, tgt), rec_src, rec_tgt, fg


def replay(vol: Volume, record: TransformRecord, body: Mask | None = None) -> Volume:
    """Re-apply recorded steps to the original volume (bit-for-bit)."""
    for step in record.steps:
        p = step.params
        if step.kind == "body-mask":
            if body is None:
                raise CorruptedRecordError("body-mask step needs the original mask to replay")
            data = vol.data.copy()
            data[~body.data] = p["fill"]
            vol = vol.with_data(data)
        elif step.kind == "resample":
            dims = tuple(
                int(math.ceil(n * s / t))
                for n, s, t in zip(vol.dims, vol.spacing, p["to_spacing"])
            )
            vol = _resample_to_grid(vol, dims, tuple(p["to_spacing"]), p["fill"])
        elif step.kind == "clip":
            vol = vol.with_data(np.clip(vol.data, p["low"], p["high"]))
        elif step.kind == "normalize":
            data = ((vol.data.astype(np.float64) - p["mean"]) / p["std"]).astype(np.float32)
            vol = vol.with_data(data)
        elif step.kind == "pad":
            data = np.pad(vol.data, list(zip(p["lo"], p["hi"])), mode="constant",
                          constant_values=np.float32(p["fill"]))
            shift = vol.direction @ (np.asarray(vol.spacing) * np.asarray(p["lo"], float))
            vol = Volume(data, vol.spacing, tuple(np.asarray(vol.origin) - shift),
                         vol.direction, vol.modality)
        else:
            raise CorruptedRecordError(f"unknown step kind {step.kind!r}")
    return vol


def invert_to_original(pred: Volume, record: TransformRecord) -> Volume:
    """Map a prediction back to the original image space.

    Undone in reverse order: padding is cropped, normalization is
    inverted (v * std + mean), and a single resampling pass restores the
    original spacing, dims and origin. Clipping and body masking are
    information-destroying and stay as-is.
    """
    vol = pred
    for step in reversed(record.steps):
        p = step.params
        if step.kind == "pad":
            if not {"lo", "hi", "origin"} <= p.keys():
                raise CorruptedRecordError("pad step missing parameters")
            lo, hi = p["lo"], p["hi"]
            sl = tuple(slice(l, n - h) for l, h, n in zip(lo, hi, vol.dims))
            vol = Volume(vol.data[sl], vol.spacing, tuple(p["origin"]),
                         vol.direction, vol.modality)
        elif step.kind == "normalize":
            if "mean" not in p or "std" not in p:
                raise CorruptedRecordError("normalize step missing mean/std")
            data = (vol.data.astype(np.float64) * p["std"] + p["mean"]).astype(np.float32)
            vol = vol.with_data(data)
        elif step.kind == "resample":
            if not {"from_dims", "from_spacing", "from_origin"} <= p.keys():
                raise CorruptedRecordError("resample step missing original geometry")
            vol = _resample_to_grid(vol, tuple(p["from_dims"]), tuple(p["from_spacing"]),
                                    p.get("fill", 0.0))
            vol = Volume(vol.data, tuple(p["from_spacing"]), tuple(p["from_origin"]),
                         vol.direction, vol.modality)
        elif step.kind in ("clip", "body-mask"):
            continue
        else:
            raise CorruptedRecordError(f"unknown step kind {step.kind!r}")
    return vol
