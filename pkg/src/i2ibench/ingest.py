"""Dataset manifests, splitting, modality conversions and phantom data.

The phantom generator produces seeded, analytically known volume pairs so
the full pipeline can run at desk scale: the target is an exact
voxelwise piecewise-linear transform of the source (see
:func:`phantom_transform`), which gives every downstream stage a closed
form to check against.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .preprocess import DegenerateMaskError, TransformStep
from .volume import CardinalityError, Mask, Modality, ParameterError, ShapeError, Volume


class ManifestError(ValueError):
    pass


@dataclass
class Subject:
    subject_id: str
    source_path: str
    target_path: str
    body_mask_path: str | None = None
    lesion_mask_path: str | None = None
    weight_kg: float | None = None
    injected_dose_MBq: float | None = None


@dataclass
class DatasetManifest:
    dataset_id: str
    task: tuple[Modality, Modality]
    district: str
    subjects: list[Subject] = field(default_factory=list)

    def __post_init__(self):
        self.task = (Modality(self.task[0]), Modality(self.task[1]))
        ids = [s.subject_id for s in self.subjects]
        if len(ids) != len(set(ids)):
            raise ManifestError("subject_ids must be unique")
        for s in self.subjects:
            if not s.source_path or not s.target_path:
                raise ManifestError(f"subject {s.subject_id}: paired paths both required")

    def to_json(self) -> str:
        doc = {
            "dataset_id": self.dataset_id,
            "task": {"source": self.task[0].value, "target": self.task[1].value},
            "district": self.district,
            "subjects": [
                {k: v for k, v in vars(s).items() if v is not None} for s in self.subjects
            ],
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        subjects = [Subject(**s) for s in doc["subjects"]]
        return cls(
            dataset_id=doc["dataset_id"],
            task=(doc["task"]["source"], doc["task"]["target"]),
            district=doc.get("district", "unspecified"),
            subjects=subjects,
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as f:
            return cls.from_json(f.read())


@dataclass
class SplitSpec:
    test_fraction: float = 0.25
    validation_count: int = 5
    seed: int = 0


def split_subjects(manifest: DatasetManifest, spec: SplitSpec):
    """Deterministic train/validation/test partition.

    Test size is round-half-up of test_fraction * N (matches the published
    per-dataset test counts); validation is drawn from the remainder. The
    shuffle runs over sorted subject ids so manifest order is irrelevant.
    """
    n = len(manifest.subjects)
    if n < spec.validation_count + 2:
        raise CardinalityError(
            f"{n} subjects cannot supply a split with {spec.validation_count} validation cases"
        )
    by_id = {s.subject_id: s for s in manifest.subjects}
    ids = sorted(by_id)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    order = [ids[i] for i in rng.permutation(n)]
    n_test = int(math.floor(n * spec.test_fraction + 0.5))
    test_ids = set(order[:n_test])
    val_ids = set(order[n_test : n_test + spec.validation_count])
    train = [by_id[i] for i in ids if i not in test_ids and i not in val_ids]
    validation = [by_id[i] for i in ids if i in val_ids]
    test = [by_id[i] for i in ids if i in test_ids]
    return train, validation, test


def suv_convert_enhance(pet_bq_ml: Volume, weight_kg: float, dose_mbq: float) -> Volume:
    """Bq/mL to SUV (g/mL): scale by W * 1000 / (D * 1e6)."""
    if weight_kg <= 0 or dose_mbq <= 0:
        raise ParameterError("weight and dose must be positive")
    scale = weight_kg * 1000.0 / (dose_mbq * 1.0e6)
    return pet_bq_ml.with_data((pet_bq_ml.data.astype(np.float64) * scale).astype(np.float32))


def suv_convert_autopet(r_kbq_ml: Volume, decay_corrected_activity_kbq: float,
                        weight_kg: float) -> Volume:
    """kBq/mL to SUV: r / (a' * W) with decay-corrected activity a'."""
    if decay_corrected_activity_kbq <= 0 or weight_kg <= 0:
        raise ParameterError("activity and weight must be positive")
    denom = decay_corrected_activity_kbq * weight_kg
    return r_kbq_ml.with_data((r_kbq_ml.data.astype(np.float64) / denom).astype(np.float32))


def crop_lung_region(vol: Volume, lung: Mask, margin_mm: float = 20.0):
    """Crop along z to the lung extent plus a physical margin.

    In-plane dims are untouched. Returns the cropped volume and a crop
    record that applies the identical z-range to paired volumes and
    supports re-embedding.
    """
    if lung.dims != vol.dims:
        raise ShapeError(f"lung mask dims {lung.dims} != volume dims {vol.dims}")
    if lung.is_empty:
        raise DegenerateMaskError("lung mask selects no voxels")
    has_lung = np.any(lung.data, axis=(0, 1))
    zs = np.flatnonzero(has_lung)
    sz = vol.spacing[2]
    pad = int(math.ceil(margin_mm / sz))
    lo = max(0, int(zs[0]) - pad)
    hi = min(vol.dims[2] - 1, int(zs[-1]) + pad)
    record = TransformStep(
        "crop",
        {"axis": 2, "lo": lo, "hi": hi, "orig_dim": vol.dims[2], "orig_origin": list(vol.origin)},
    )
    return apply_crop(vol, record), record


def apply_crop(vol: Volume, record: TransformStep) -> Volume:
    p = record.params
    if vol.dims[2] != p["orig_dim"]:
        raise ShapeError(f"crop record is for nz={p['orig_dim']}, volume has nz={vol.dims[2]}")
    lo, hi = p["lo"], p["hi"]
    shift = vol.direction @ np.array([0.0, 0.0, vol.spacing[2] * lo])
    origin = tuple(np.asarray(vol.origin) + shift)
    return Volume(vol.data[:, :, lo : hi + 1], vol.spacing, origin, vol.direction, vol.modality)


def uncrop(vol: Volume, record: TransformStep, fill: float = 0.0) -> Volume:
    p = record.params
    lo, hi = p["lo"], p["hi"]
    if vol.dims[2] != hi - lo + 1:
        raise ShapeError("volume z-extent does not match the crop record")
    data = np.full(vol.dims[:2] + (p["orig_dim"],), np.float32(fill), dtype=np.float32)
    data[:, :, lo : hi + 1] = vol.data
    return Volume(data, vol.spacing, tuple(p["orig_origin"]), vol.direction, vol.modality)


_PHANTOM_RANGE = {
    Modality.CT: (-1024.0, 1500.0),
    Modality.CBCT: (-1024.0, 1600.0),
    Modality.MRI_T1W: (0.0, 1000.0),
    Modality.MRI_T2W: (0.0, 1100.0),
    Modality.MRI_T2F: (0.0, 900.0),
    Modality.PET: (0.0, 12.0),
}

# Target-value fractions at source fractions [0, .25, .5, .75, 1]: a fixed
# monotone bend so the source-to-target map is piecewise linear, strictly
# increasing, and cheap to re-evaluate by hand.
_BEND = (0.0, 0.15, 0.45, 0.8, 1.0)


def phantom_transform(task):
    """Knots (xp, fp) of the documented voxelwise source-to-target map."""
    src, tgt = Modality(task[0]), Modality(task[1])
    s_lo, s_hi = _PHANTOM_RANGE[src]
    t_lo, t_hi = _PHANTOM_RANGE[tgt]
    xp = tuple(s_lo + f * (s_hi - s_lo) for f in (0.0, 0.25, 0.5, 0.75, 1.0))
    fp = tuple(t_lo + f * (t_hi - t_lo) for f in _BEND)
    return xp, fp


def _ellipsoid_rho(shape, center, semi_axes):
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, a in zip(grids, center, semi_axes):
        acc = acc + ((g - c) / a) ** 2
    return np.sqrt(acc)


def _smooth_inside(rho, width):
    return 1.0 / (1.0 + np.exp((rho - 1.0) / width))


def generate_phantom_pair(seed: int, dims=(112, 112, 112), spacing=(1.0, 1.0, 1.0),
                          task=(Modality.MRI_T1W, Modality.CT)):
    """Seeded analytic phantom pair with body and lesion masks.

    Smooth logistic shells keep the field resampling-friendly; lesion
    masks are crisp ellipsoids strictly inside the body. The target is
    exactly ``np.interp(source, *phantom_transform(task))`` at every
    voxel.
    """
    dims = tuple(int(d) for d in dims)
    src_mod, tgt_mod = Modality(task[0]), Modality(task[1])
    rng = np.random.Generator(np.random.PCG64(seed))

    center = [0.5 * (n - 1) + rng.uniform(-0.02, 0.02) * n for n in dims]
    body_axes = [0.42 * n * (1.0 + rng.uniform(-0.05, 0.05)) for n in dims]
    edge = 2.5 / float(np.mean(body_axes))  # ~2.5 voxel transition

    rho_body = _ellipsoid_rho(dims, center, body_axes)
    w_body = _smooth_inside(rho_body, edge)

    inner_center = [c + rng.uniform(-0.08, 0.08) * a for c, a in zip(center, body_axes)]
    inner_axes = [0.55 * a for a in body_axes]
    w_inner = _smooth_inside(_ellipsoid_rho(dims, inner_center, inner_axes), edge * 1.5)

    zz = np.linspace(-0.5, 0.5, dims[2])[None, None, :]
    s = w_body * (0.45 + 0.2 * w_inner + 0.12 * zz)

    n_lesions = int(rng.integers(1, 6))
    lesions = np.zeros(dims, dtype=bool)
    for _ in range(n_lesions):
        while True:
            lc = [c + rng.uniform(-0.5, 0.5) * a for c, a in zip(center, body_axes)]
            rho_c = math.sqrt(sum(((l - c) / a) ** 2 for l, c, a in zip(lc, center, body_axes)))
            if rho_c < 0.55:
                break
        radii = [float(rng.uniform(3.0, 8.0)) for _ in range(3)]
        rho_l = _ellipsoid_rho(dims, lc, radii)
        lesions |= rho_l <= 1.0
        s = s + 0.3 * np.exp(-2.0 * rho_l**2)

    s = np.clip(s, 0.0, 1.0)
    lo, hi = _PHANTOM_RANGE[src_mod]
    source_data = (lo + (hi - lo) * s).astype(np.float32)

    xp, fp = phantom_transform((src_mod, tgt_mod))
    target_data = np.interp(source_data.astype(np.float64), xp, fp).astype(np.float32)

    # generous mask with an air margin, like provider-shipped body masks;
    # keeps the foreground-min fill close to the true background value
    body = Mask(w_body > 0.02)
    lesions &= body.data
    source = Volume(source_data, spacing, modality=src_mod)
    target = Volume(target_data, spacing, modality=tgt_mod)
    return source, target, body, Mask(lesions)


def read_metadata_csv(path) -> dict[str, dict[str, float]]:
    """Per-subject numeric metadata (weight/dose columns) keyed by subject_id."""
    out: dict[str, dict[str, float]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            sid = row.pop("subject_id", None)
            if sid is None:
                raise ManifestError("metadata CSV needs a subject_id column")
            out[sid] = {k: float(v) for k, v in row.items() if v not in (None, "")}
    return out
