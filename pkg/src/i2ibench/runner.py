"""End-to-end orchestration: preprocess, infer, evaluate, rank, phantoms.

Subjects are processed independently (optionally in a thread pool); one
subject failing never aborts the run. All emitted files are byte-stable:
gzip members carry no mtime, JSON is key-sorted, CSV rows are sorted by
subject id, so identical configs produce identical output trees.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics as metrics_mod
from .config import ExperimentConfig
from .ingest import DatasetManifest, Subject, generate_phantom_pair, split_subjects
from .models import ModelContext, registry_get
from .nifti import read_nifti, write_nifti
from .patching import build_patch_grid, extract_patch, gaussian_importance, stitch
from .preprocess import TransformRecord, invert_to_original, run_pipeline
from .volume import Mask, Modality, Volume


class AlignmentError(ValueError):
    pass


@dataclass
class RunReport:
    succeeded: list[str] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures

    def merge_sorted(self):
        self.succeeded.sort()
        return self


def _resolve(base_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))


def load_manifest(cfg: ExperimentConfig) -> DatasetManifest:
    manifest = DatasetManifest.load(cfg.manifest_path)
    base = os.path.dirname(os.path.abspath(cfg.manifest_path))
    for s in manifest.subjects:
        s.source_path = _resolve(base, s.source_path)
        s.target_path = _resolve(base, s.target_path)
        if s.body_mask_path:
            s.body_mask_path = _resolve(base, s.body_mask_path)
        if s.lesion_mask_path:
            s.lesion_mask_path = _resolve(base, s.lesion_mask_path)
    return manifest


def _paths(cfg: ExperimentConfig, sid: str) -> dict[str, str]:
    pre = os.path.join(cfg.output_dir, "preprocessed")
    return {
        "source": os.path.join(pre, f"{sid}_source.nii.gz"),
        "target": os.path.join(pre, f"{sid}_target.nii.gz"),
        "source_record": os.path.join(pre, f"{sid}_source.record.json"),
        "target_record": os.path.join(pre, f"{sid}_target.record.json"),
        "fg": os.path.join(pre, f"{sid}_fg.nii.gz"),
        "pred": os.path.join(cfg.output_dir, "predictions", f"{sid}_pred.nii.gz"),
    }


def _for_each_subject(subjects, fn, jobs: int) -> RunReport:
    report = RunReport()

    def run_one(subject):
        try:
            fn(subject)
            return subject.subject_id, None
        except Exception as exc:  # isolate per-subject failures
            return subject.subject_id, f"{type(exc).__name__}: {exc}"

    if jobs <= 1:
        results = [run_one(s) for s in subjects]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_one, subjects))
    for sid, err in results:
        if err is None:
            report.succeeded.append(sid)
        else:
            report.failures[sid] = err
    return report.merge_sorted()


def run_preprocess(cfg: ExperimentConfig, jobs: int | None = None) -> RunReport:
    """Preprocess every manifest subject; writes volumes, sidecars, fg masks."""
    manifest = load_manifest(cfg)
    src_mod, tgt_mod = manifest.task
    pipeline_cfg = cfg.pipeline_config(src_mod, tgt_mod)
    os.makedirs(os.path.join(cfg.output_dir, "preprocessed"), exist_ok=True)

    def process(subject: Subject):
        paths = _paths(cfg, subject.subject_id)
        source = read_nifti(subject.source_path, modality=src_mod)
        target = read_nifti(subject.target_path, modality=tgt_mod)
        body = None
        if subject.body_mask_path:
            body = Mask(read_nifti(subject.body_mask_path).data > 0.5)
        pair, rec_src, rec_tgt, fg = run_pipeline(source, target, body, pipeline_cfg)
        write_nifti(pair.source, paths["source"])
        write_nifti(pair.target, paths["target"])
        rec_src.save(paths["source_record"])
        rec_tgt.save(paths["target_record"])
        write_nifti(pair.source.with_data(fg.data.astype(np.float32)), paths["fg"])

    return _for_each_subject(manifest.subjects, process, jobs or cfg.jobs)


def run_infer(cfg: ExperimentConfig, jobs: int | None = None) -> RunReport:
    """Sliding-window inference over the test split, mapped to original space."""
    manifest = load_manifest(cfg)
    tgt_mod = manifest.task[1]
    _, _, test = split_subjects(manifest, cfg.split)
    factory = registry_get(cfg.model.name)
    imap = gaussian_importance(cfg.patch.shape, cfg.patch.sigma_scale)
    os.makedirs(os.path.join(cfg.output_dir, "predictions"), exist_ok=True)

    def process(subject: Subject):
        paths = _paths(cfg, subject.subject_id)
        source = read_nifti(paths["source"])
        target_record = TransformRecord.load(paths["target_record"])
        ctx = ModelContext(
            target_modality=tgt_mod,
            target_record=target_record,
            preprocessed_target=read_nifti(paths["target"]),
            patch_size=cfg.patch.shape,
            seed=cfg.seed,
            params=cfg.model.params,
        )
        model = factory(ctx)
        grid = build_patch_grid(source.dims, cfg.patch.shape, cfg.patch.overlap)
        outputs = [
            (origin, model.translate(extract_patch(source.data, origin, cfg.patch.shape),
                                     origin=origin))
            for origin in grid.origins
        ]
        stitched = stitch(outputs, grid, imap, source.dims)
        vol = Volume(stitched, source.spacing, source.origin, source.direction, tgt_mod)
        pred = invert_to_original(vol, target_record)
        write_nifti(pred, paths["pred"])

    return _for_each_subject(test, process, jobs or cfg.jobs)


def run_evaluate(cfg: ExperimentConfig, jobs: int | None = None) -> RunReport:
    """Whole-volume metrics (plus lesion records when masks exist) for the test split."""
    manifest = load_manifest(cfg)
    tgt_mod = manifest.task[1]
    _, _, test = split_subjects(manifest, cfg.split)
    out_dir = os.path.join(cfg.output_dir, "metrics")
    os.makedirs(out_dir, exist_ok=True)

    rows: dict[str, metrics_mod.SubjectMetrics] = {}
    lesion_rows: list[tuple[str, metrics_mod.LesionRecord]] = []

    def process(subject: Subject):
        paths = _paths(cfg, subject.subject_id)
        if not os.path.exists(paths["pred"]):
            raise FileNotFoundError(f"no prediction at {paths['pred']}; run infer first")
        pred = read_nifti(paths["pred"])
        ref = read_nifti(subject.target_path, modality=tgt_mod)
        data_range = metrics_mod.data_range_for(tgt_mod, ref.data)
        rows[subject.subject_id] = metrics_mod.SubjectMetrics(
            subject_id=subject.subject_id,
            psnr_dB=metrics_mod.psnr(pred.data, ref.data, data_range),
            ssim=metrics_mod.ssim3d(pred.data, ref.data, data_range),
            nmse=metrics_mod.nmse(pred.data, ref.data),
        )
        if subject.lesion_mask_path:
            lesions = Mask(read_nifti(subject.lesion_mask_path).data > 0.5)
            for record in metrics_mod.lesion_analysis(
                pred.data, ref.data, lesions, ref.spacing, data_range
            ):
                lesion_rows.append((subject.subject_id, record))

    report = _for_each_subject(test, process, jobs or cfg.jobs)

    ordered = [rows[sid] for sid in sorted(rows)]
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["subject_id", "psnr_dB", "ssim", "nmse"])
        for r in ordered:
            w.writerow([r.subject_id, repr(r.psnr_dB), repr(r.ssim), repr(r.nmse)])

    if ordered:
        summary = metrics_mod.summarize(ordered)
        aggregate = {
            "schema_version": 1,
            "model": cfg.model.name,
            "dataset_id": manifest.dataset_id,
            "district": manifest.district,
            "task": f"{manifest.task[0].value}->{manifest.task[1].value}",
            "n_subjects": len(ordered),
            "metrics": {name: vars(s) for name, s in summary.items()},
        }
        with open(os.path.join(out_dir, "aggregate.json"), "w") as f:
            json.dump(aggregate, f, sort_keys=True, indent=2)
            f.write("\n")

    if lesion_rows:
        metrics_mod.assign_size_groups([rec for _, rec in lesion_rows])
        lesion_rows.sort(key=lambda item: (item[0], item[1].lesion_id))
        with open(os.path.join(out_dir, "lesions.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["subject_id", "lesion_id", "voxel_count",
                        "equivalent_diameter_mm", "size_group", "psnr_dB", "ssim"])
            for sid, rec in lesion_rows:
                w.writerow([sid, rec.lesion_id, rec.voxel_count,
                            repr(rec.equivalent_diameter_mm), rec.size_group,
                            repr(rec.psnr_dB), repr(rec.ssim)])
    return report


def run_rank(result_dirs: list[str], out_dir: str) -> dict[str, str]:
    """Assemble Table-4-style rankings from per-experiment aggregates."""
    from .stats import pairwise_table, rank_models

    aggregates = []
    for d in result_dirs:
        path = os.path.join(d, "metrics", "aggregate.json") if os.path.isdir(d) else d
        if not os.path.exists(path):
            path = os.path.join(d, "aggregate.json")
        with open(path) as f:
            aggregates.append(json.load(f))

    models = sorted({a["model"] for a in aggregates})
    if len(models) < 2:
        raise AlignmentError("ranking needs at least 2 distinct models")
    tasks_by_model: dict[str, set[str]] = {}
    means: dict[str, dict[str, dict[str, float]]] = {"psnr_dB": {}, "ssim": {}}
    for a in aggregates:
        task_id = f"{a['dataset_id']}/{a['district']}/{a['task']}"
        tasks_by_model.setdefault(a["model"], set()).add(task_id)
        for metric in means:
            means[metric].setdefault(task_id, {})[a["model"]] = a["metrics"][metric]["mean"]
    task_sets = {frozenset(v) for v in tasks_by_model.values()}
    if len(task_sets) != 1:
        raise AlignmentError(
            "models cover different task sets: "
            + "; ".join(f"{m}: {sorted(t)}" for m, t in sorted(tasks_by_model.items()))
        )

    os.makedirs(out_dir, exist_ok=True)
    written = {}
    for metric, label in (("psnr_dB", "psnr"), ("ssim", "ssim")):
        table = rank_models(means[metric], higher_is_better=True)
        rank_path = os.path.join(out_dir, f"rank_table_{label}.csv")
        with open(rank_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task"] + table.models)
            for i, task in enumerate(table.tasks):
                w.writerow([task] + [repr(float(r)) for r in table.ranks[i]])
        pairs = pairwise_table(table)
        wilcoxon_path = os.path.join(out_dir, f"wilcoxon_{label}.csv")
        with open(wilcoxon_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["vs."] + table.models)
            for row in table.models:
                cells = []
                for col in table.models:
                    if row == col:
                        cells.append("-")
                        continue
                    r = pairs[(row, col)]
                    if r.p_one_tailed is None:
                        cells.append("no-test")
                    else:
                        cells.append(f"{r.n_dominated}{'*' if r.significant else ''}")
                w.writerow([row] + cells)
        written[f"rank_{label}"] = rank_path
        written[f"wilcoxon_{label}"] = wilcoxon_path
    return written


DEFAULT_PHANTOM_TASK = (Modality.MRI_T1W, Modality.CT)


def make_phantom_dataset(out_dir: str, n_subjects: int, seed: int = 0,
                         task=DEFAULT_PHANTOM_TASK, dims=(112, 112, 112),
                         spacing=(1.0, 1.0, 1.0), district: str = "head-neck") -> str:
    """Write a seeded phantom dataset plus manifest and a starter config."""
    os.makedirs(out_dir, exist_ok=True)
    subjects = []
    for i in range(n_subjects):
        sid = f"s{i:03d}"
        source, target, body, lesions = generate_phantom_pair(
            seed=seed * 100003 + i, dims=dims, spacing=spacing, task=task
        )
        write_nifti(source, os.path.join(out_dir, f"{sid}_source.nii.gz"))
        write_nifti(target, os.path.join(out_dir, f"{sid}_target.nii.gz"))
        write_nifti(source.with_data(body.data.astype(np.float32)),
                    os.path.join(out_dir, f"{sid}_body.nii.gz"))
        write_nifti(source.with_data(lesions.data.astype(np.float32)),
                    os.path.join(out_dir, f"{sid}_lesions.nii.gz"))
        subjects.append(Subject(
            subject_id=sid,
            source_path=f"{sid}_source.nii.gz",
            target_path=f"{sid}_target.nii.gz",
            body_mask_path=f"{sid}_body.nii.gz",
            lesion_mask_path=f"{sid}_lesions.nii.gz",
        ))
    manifest = DatasetManifest(
        dataset_id="phantom",
        task=(Modality(task[0]), Modality(task[1])),
        district=district,
        subjects=subjects,
    )
    manifest_path = os.path.join(out_dir, "manifest.json")
    manifest.save(manifest_path)

    config = {
        "schema_version": 1,
        "manifest": "manifest.json",
        "output_dir": "out",
        "seed": seed,
        "model": {"name": "identity", "params": {}},
        "split": {"test_fraction": 0.25, "validation_count": min(5, max(0, n_subjects - 3)),
                  "seed": seed},
        "pipeline": {"target_spacing": list(spacing), "source_threshold": 0.1,
                     "target_threshold": 0.1},
        "patch": {"size": 96, "overlap": 0.625, "sigma_scale": 0.125},
    }
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config, f, sort_keys=True, indent=2)
        f.write("\n")
    return manifest_path
