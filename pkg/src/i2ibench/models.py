"""Plug-in model interface plus deterministic reference models.

Every benchmarked generator conforms to :class:`PatchModel`:
``translate`` maps a 96^3 source patch to a target patch of the same
shape. Latent models wrap the toy codec and a sampler internally, so the
stitcher always sees image-space patches. The registry maps names to
factories so experiment configs can select models without code changes.
"""

from __future__ import annotations

import struct
import subprocess
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import genproc
from .preprocess import TransformRecord
from .volume import ConfigurationError, Modality, ShapeError, Volume


class ModelLookupError(KeyError):
    pass


class RegistryConflictError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDescriptor:
    name: str
    family: str = "gan-like"  # "gan-like" | "latent"
    operates_on: str = "image-patch"  # "image-patch" | "latent"
    deterministic: bool = True
    single_threaded: bool = False


class PatchModel:
    """Base contract: translate(source patch) -> target patch, same dims."""

    descriptor: ModelDescriptor

    def translate(self, patch: np.ndarray, *, origin=None) -> np.ndarray:
        raise NotImplementedError


class _FnModel(PatchModel):
    def __init__(self, descriptor: ModelDescriptor, fn):
        self.descriptor = descriptor
        self._fn = fn

    def translate(self, patch, *, origin=None):
        out = np.asarray(self._fn(np.asarray(patch), origin), dtype=np.float32)
        if out.shape != np.shape(patch):
            raise ShapeError(f"model output shape {out.shape} != input {np.shape(patch)}")
        return out


def identity_model() -> PatchModel:
    """Pass-through model; end-to-end it must reproduce the input volume."""
    return _FnModel(ModelDescriptor(name="identity"), lambda p, o: p)


def baseline_model(target_modality: Modality, target_record: TransformRecord) -> PatchModel:
    """Structure-free baseline: 0 HU (water) for CT targets, mean elsewhere.

    The water value is pushed through the recorded clip+normalize
    parameters; for non-CT targets the normalized mean is 0 by
    construction.
    """
    target_modality = Modality(target_modality)
    norm = target_record.find("normalize")
    if norm is None:
        raise ConfigurationError("baseline model needs a normalize step in the target record")
    if target_modality in (Modality.CT, Modality.CBCT):
        value = (0.0 - norm.params["mean"]) / norm.params["std"]
    else:
        value = 0.0
    value = np.float32(value)
    return _FnModel(
        ModelDescriptor(name="baseline"),
        lambda p, o: np.full_like(np.asarray(p, dtype=np.float32), value),
    )


def oracle_latent_model(kind: str, target_provider: Callable, steps: int = 50,
                        seed: int = 0) -> PatchModel:
    """Latent sampler driven by an analytic oracle predictor.

    ``target_provider(source_patch, origin)`` returns the known target
    patch; the model encodes it, runs the chosen sampler with the exact
    oracle, and decodes. Output equals the blockwise-mean field of the
    provided target.
    """
    if kind not in ("ddim", "bridge", "flow"):
        raise ConfigurationError(f"unknown oracle sampler kind {kind!r}")
    sched = genproc.make_scaled_linear_schedule() if kind == "ddim" else None
    bridge = genproc.make_bridge_schedule() if kind == "bridge" else None

    def fn(patch, origin):
        target = np.asarray(target_provider(patch, origin))
        z_src = genproc.toy_encode(patch)
        z_star = genproc.toy_encode(target)
        if kind == "ddim":
            z = genproc.ddim_sample(z_src, genproc.oracle_noise_predictor(z_star, sched),
                                    sched, steps=steps, seed=seed)
        elif kind == "bridge":
            z = genproc.bridge_sample(z_src, genproc.oracle_target_predictor(z_star),
                                      bridge, steps=steps, seed=seed)
        else:
            z = genproc.flow_sample(z_src, genproc.oracle_velocity_predictor(z_star),
                                    steps=max(steps, 1))
        return genproc.toy_decode(z)

    return _FnModel(
        ModelDescriptor(name=f"oracle-{kind}", family="latent", operates_on="latent"),
        fn,
    )


class SubprocessPatchModel(PatchModel):
    """External model bridge: patches cross a child process over pipes.

    Framing both ways: 8-byte little-endian payload byte count, then the
    raw little-endian float32 voxels. Single-threaded by construction.
    """

    def __init__(self, argv: list[str], name: str = "subprocess"):
        self.descriptor = ModelDescriptor(name=name, deterministic=False, single_threaded=True)
        self._proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)

    def translate(self, patch, *, origin=None):
        patch = np.asarray(patch, dtype="<f4")
        payload = patch.tobytes()
        self._proc.stdin.write(struct.pack("<Q", len(payload)))
        self._proc.stdin.write(payload)
        self._proc.stdin.flush()
        header = self._proc.stdout.read(8)
        if len(header) != 8:
            raise IOError("subprocess model closed the pipe")
        (n,) = struct.unpack("<Q", header)
        raw = self._proc.stdout.read(n)
        if len(raw) != n:
            raise IOError(f"subprocess model sent {len(raw)} of {n} bytes")
        out = np.frombuffer(raw, dtype="<f4")
        if out.size != patch.size:
            raise ShapeError(f"subprocess returned {out.size} voxels, expected {patch.size}")
        return out.reshape(patch.shape).astype(np.float32)

    def close(self):
        if self._proc.stdin:
            self._proc.stdin.close()
        self._proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class ModelContext:
    """Everything a model factory may need when the runner instantiates it."""

    target_modality: Modality = Modality.CT
    target_record: TransformRecord | None = None
    preprocessed_target: Volume | None = None
    patch_size: tuple[int, int, int] = (96, 96, 96)
    seed: int = 0
    params: dict = field(default_factory=dict)


_REGISTRY: dict[str, Callable[[ModelContext], PatchModel]] = {}


def registry_register(name: str, factory: Callable[[ModelContext], PatchModel]) -> None:
    if name in _REGISTRY:
        raise RegistryConflictError(f"model {name!r} is already registered")
    _REGISTRY[name] = factory


def registry_get(name: str) -> Callable[[ModelContext], PatchModel]:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ModelLookupError(f"no model named {name!r}; known: {sorted(_REGISTRY)}") from None


def registered_names() -> list[str]:
    return sorted(_REGISTRY)


def _target_patch_provider(ctx: ModelContext):
    if ctx.preprocessed_target is None:
        raise ConfigurationError("oracle models need the preprocessed target volume")
    data = ctx.preprocessed_target.data
    px, py, pz = ctx.patch_size

    def provider(patch, origin):
        if origin is None:
            raise ConfigurationError("oracle models need patch origins from the grid runner")
        x, y, z = origin
        return data[x : x + px, y : y + py, z : z + pz]

    return provider


registry_register("identity", lambda ctx: identity_model())
registry_register("baseline", lambda ctx: baseline_model(ctx.target_modality, ctx.target_record))
for _kind in ("ddim", "bridge", "flow"):
    registry_register(
        f"oracle-{_kind}",
        lambda ctx, _k=_kind: oracle_latent_model(
            _k, _target_patch_provider(ctx),
            steps=int(ctx.params.get("steps", 50 if _k != "flow" else 8)),
            seed=ctx.seed,
        ),
    )
