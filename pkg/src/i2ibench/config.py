"""Experiment configuration: JSON in, validated dataclasses out.

Configs pin every pipeline constant; patch geometry defaults to the
benchmark values (96 voxels, 0.625 overlap, 0.125 sigma scale). Relative
paths resolve against the config file's directory, and the BENCH_SEED
environment variable overrides the configured seed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

from .ingest import SplitSpec
from .preprocess import PipelineConfig
from .volume import FillRule, Modality, ModalityRange

SCHEMA_VERSION = 1
SEED_ENV = "BENCH_SEED"


class ConfigValidationError(ValueError):
    """Carries one message per offending field path."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid config:\n  " + "\n  ".join(errors))


@dataclass
class ModelSpec:
    name: str = "identity"
    params: dict = field(default_factory=dict)


@dataclass
class PatchSpec:
    size: int = 96
    overlap: float = 0.625
    sigma_scale: float = 0.125

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.size, self.size, self.size)


@dataclass
class ExperimentConfig:
    manifest_path: str
    output_dir: str
    seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    target_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    source_threshold: float = 0.1
    target_threshold: float = 0.1
    pad_multiple: int | None = None
    patch: PatchSpec = field(default_factory=PatchSpec)
    ranges: dict = field(default_factory=dict)
    jobs: int = 1

    def pipeline_config(self, source_mod: Modality, target_mod: Modality) -> PipelineConfig:
        return PipelineConfig(
            target_spacing=self.target_spacing,
            source_threshold=self.source_threshold,
            target_threshold=self.target_threshold,
            source_range=_range_override(self.ranges.get("source"), source_mod),
            target_range=_range_override(self.ranges.get("target"), target_mod),
            pad_multiple=self.pad_multiple or self.patch.size,
        )


def _range_override(spec: dict | None, modality: Modality) -> ModalityRange | None:
    if not spec:
        return None
    return ModalityRange(
        modality=modality,
        clip_low=float(spec.get("clip_low", -math.inf)),
        clip_high=float(spec.get("clip_high", math.inf)),
        fill_rule=FillRule(spec.get("fill_rule", "foreground-min")),
    )


def _check(errors, ok: bool, path: str, message: str):
    if not ok:
        errors.append(f"{path}: {message}")


def parse_config(doc: dict, base_dir: str = ".") -> ExperimentConfig:
    errors: list[str] = []
    version = doc.get("schema_version", SCHEMA_VERSION)
    _check(errors, version == SCHEMA_VERSION, "schema_version",
           f"expected {SCHEMA_VERSION}, got {version}")

    manifest = doc.get("manifest")
    _check(errors, isinstance(manifest, str) and manifest != "", "manifest",
           "required path to a dataset manifest JSON")
    output_dir = doc.get("output_dir")
    _check(errors, isinstance(output_dir, str) and output_dir != "", "output_dir",
           "required output directory")

    seed = doc.get("seed", 0)
    _check(errors, isinstance(seed, int), "seed", "must be an integer")

    mdoc = doc.get("model", {})
    model = ModelSpec(name=mdoc.get("name", "identity"), params=dict(mdoc.get("params", {})))
    _check(errors, isinstance(model.name, str) and model.name, "model.name", "must be a name")

    sdoc = doc.get("split", {})
    split = SplitSpec(
        test_fraction=float(sdoc.get("test_fraction", 0.25)),
        validation_count=int(sdoc.get("validation_count", 5)),
        seed=int(sdoc.get("seed", seed if isinstance(seed, int) else 0)),
    )
    _check(errors, 0.0 < split.test_fraction < 1.0, "split.test_fraction", "must be in (0, 1)")
    _check(errors, split.validation_count >= 0, "split.validation_count", "must be >= 0")

    pdoc = doc.get("pipeline", {})
    spacing = pdoc.get("target_spacing", [1.0, 1.0, 1.0])
    ok = isinstance(spacing, (list, tuple)) and len(spacing) == 3
    _check(errors, ok, "pipeline.target_spacing", "must be a list of 3 numbers")
    if ok:
        for i, s in enumerate(spacing):
            _check(errors, isinstance(s, (int, float)) and s > 0,
                   f"pipeline.target_spacing[{i}]", "must be > 0")
    src_thr = float(pdoc.get("source_threshold", 0.1))
    tgt_thr = float(pdoc.get("target_threshold", 0.1))
    pad_multiple = pdoc.get("pad_multiple")
    if pad_multiple is not None:
        _check(errors, isinstance(pad_multiple, int) and pad_multiple >= 1,
               "pipeline.pad_multiple", "must be an integer >= 1")

    tdoc = doc.get("patch", {})
    patch = PatchSpec(
        size=int(tdoc.get("size", 96)),
        overlap=float(tdoc.get("overlap", 0.625)),
        sigma_scale=float(tdoc.get("sigma_scale", 0.125)),
    )
    _check(errors, patch.size >= 1, "patch.size", "must be >= 1")
    _check(errors, 0.0 <= patch.overlap < 1.0, "patch.overlap", "must be in [0, 1)")
    _check(errors, patch.sigma_scale > 0.0, "patch.sigma_scale", "must be > 0")

    jobs = doc.get("jobs", 1)
    _check(errors, isinstance(jobs, int) and jobs >= 1, "jobs", "must be an integer >= 1")

    if errors:
        raise ConfigValidationError(errors)

    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigValidationError([f"{SEED_ENV}: must be an integer, got {env_seed!r}"])

    return ExperimentConfig(
        manifest_path=os.path.normpath(os.path.join(base_dir, manifest)),
        output_dir=os.path.normpath(os.path.join(base_dir, output_dir)),
        seed=seed,
        model=model,
        split=split,
        target_spacing=tuple(float(s) for s in spacing),
        source_threshold=src_thr,
        target_threshold=tgt_thr,
        pad_multiple=pad_multiple,
        patch=patch,
        ranges=dict(doc.get("ranges", {})),
        jobs=jobs,
    )


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        doc = json.load(f)
    return parse_config(doc, base_dir=os.path.dirname(os.path.abspath(path)))
