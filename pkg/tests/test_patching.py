import math

import numpy as np
import pytest

from i2ibench.patching import (
    IncompleteCoverageError,
    NoForegroundError,
    build_patch_grid,
    draw_patch_centers,
    extract_patch,
    gaussian_importance,
    sample_training_patches,
    stitch,
)
from i2ibench.preprocess import PreprocessedPair
from i2ibench.volume import Mask, ParameterError, ShapeError, Volume


def test_step_is_36_for_default_geometry():
    grid = build_patch_grid((192, 96, 96))
    xs = sorted({o[0] for o in grid.origins})
    assert xs == [0, 36, 72, 96]  # enumerated steps, final clamped to dims - patch
    assert int(round(96 * (1 - 0.625))) == 36


def test_single_origin_when_exact_fit():
    grid = build_patch_grid((96, 96, 96))
    assert grid.origins == ((0, 0, 0),)


def test_grid_covers_every_voxel():
    dims = (240, 240, 204)
    grid = build_patch_grid(dims)
    covered = np.zeros(dims, dtype=np.int32)
    for x, y, z in grid.origins:
        covered[x : x + 96, y : y + 96, z : z + 96] += 1
    assert covered.min() >= 1
    # step 36 does not divide 96, so interior coverage alternates between
    # floor(96/36) = 2 and ceil(96/36) = 3 windows per axis
    interior = covered[96:144, 96:144, 96:108]
    assert interior.min() >= 8
    assert covered[108, 108, 108] == 27


def test_grid_origins_sorted_and_rejects_small_dims():
    grid = build_patch_grid((128, 128, 128))
    assert list(grid.origins) == sorted(grid.origins)
    with pytest.raises(ShapeError):
        build_patch_grid((95, 96, 96))


def test_importance_center_peak_and_one_sigma():
    imap = gaussian_importance()
    w = imap.weights
    c = 48
    assert w[c, c, c] == 1.0
    assert w.max() == 1.0
    # 12 voxels = 1 sigma along one axis
    assert w[c + 12, c, c] == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert w[c, c - 12, c] == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_importance_symmetric_and_positive():
    w = gaussian_importance().weights
    c = 48
    for d in (1, 7, 30, 47):
        assert w[c - d, c, c] == w[c + d, c, c]
        assert w[c, c - d, c] == w[c, c + d, c]
        assert w[c, c, c - d] == w[c, c, c + d]
    assert w.min() > 0


def test_importance_requires_positive_sigma():
    with pytest.raises(ParameterError):
        gaussian_importance(sigma_scale=0.0)


def _toy_grid(dims, patch):
    # small geometry for closed-form stitch checks
    return build_patch_grid(dims, patch=patch, overlap=0.625), gaussian_importance(patch=patch)


def test_stitch_constant_patches():
    patch = (8, 8, 8)
    grid, imap = _toy_grid((14, 8, 8), patch)
    outputs = [(o, np.full(patch, 3.5, dtype=np.float32)) for o in grid.origins]
    out = stitch(outputs, grid, imap, (14, 8, 8))
    assert np.abs(out - 3.5).max() < 1e-6


def test_stitch_partition_reconstruction():
    rng = np.random.default_rng(0)
    vol = rng.normal(size=(20, 14, 8)).astype(np.float32)
    patch = (8, 8, 8)
    grid, imap = _toy_grid(vol.shape, patch)
    outputs = [(o, extract_patch(vol, o, patch)) for o in grid.origins]
    out = stitch(outputs, grid, imap, vol.shape)
    assert np.abs(out - vol).max() < 1e-5


def test_stitch_two_patch_closed_form():
    patch = (8, 8, 8)
    grid, imap = _toy_grid((11, 8, 8), patch)
    assert {o[0] for o in grid.origins} == {0, 3}
    a, b = 2.0, 5.0
    outputs = [((0, 0, 0), np.full(patch, a, dtype=np.float32)),
               ((3, 0, 0), np.full(patch, b, dtype=np.float32))]
    out = stitch(outputs, grid, imap, (11, 8, 8))
    w = imap.weights
    for x in range(3, 8):  # overlap region
        w1, w2 = w[x, 4, 4], w[x - 3, 4, 4]
        expected = (w1 * a + w2 * b) / (w1 + w2)
        assert out[x, 4, 4] == pytest.approx(expected, abs=1e-6)


def test_stitch_partition_of_unity():
    patch = (8, 8, 8)
    grid, imap = _toy_grid((20, 14, 11), patch)
    outputs = [(o, np.ones(patch, dtype=np.float32)) for o in grid.origins]
    out = stitch(outputs, grid, imap, (20, 14, 11))
    assert np.abs(out - 1.0).max() < 1e-6


def test_stitch_order_independent():
    rng = np.random.default_rng(1)
    patch = (8, 8, 8)
    grid, imap = _toy_grid((17, 11, 8), patch)
    outputs = [(o, rng.normal(size=patch).astype(np.float32)) for o in grid.origins]
    a = stitch(outputs, grid, imap, (17, 11, 8))
    b = stitch(list(reversed(outputs)), grid, imap, (17, 11, 8))
    assert np.array_equal(a, b)


def test_stitch_missing_origin_rejected():
    patch = (8, 8, 8)
    grid, imap = _toy_grid((14, 8, 8), patch)
    outputs = [(grid.origins[0], np.ones(patch, dtype=np.float32))]
    with pytest.raises(IncompleteCoverageError):
        stitch(outputs, grid, imap, (14, 8, 8))


def test_identity_grid_stitch_roundtrip_at_full_size():
    rng = np.random.default_rng(2)
    vol = rng.normal(size=(128, 128, 128)).astype(np.float32)
    grid = build_patch_grid(vol.shape)
    imap = gaussian_importance()
    outputs = [(o, extract_patch(vol, o, (96, 96, 96))) for o in grid.origins]
    out = stitch(outputs, grid, imap, vol.shape)
    assert np.abs(out - vol).max() < 1e-5


def _pair_with_fg(dims=(96, 96, 96)):
    rng = np.random.default_rng(3)
    src = Volume(rng.normal(size=dims).astype(np.float32), (1, 1, 1))
    tgt = Volume((src.data * 2 + 1).astype(np.float32), (1, 1, 1))
    return PreprocessedPair(src, tgt)


def test_sample_three_patches_default_regime():
    pair = _pair_with_fg()
    fg = Mask(np.ones(pair.source.dims, dtype=bool))
    patches = sample_training_patches(pair, fg, n=3, seed=9)
    assert len(patches) == 3
    for s, t in patches:
        assert s.shape == (96, 96, 96)
        assert np.array_equal(t, s * 2 + 1)  # identical offsets in source/target


def test_sample_single_voxel_center_clamped():
    pair = _pair_with_fg()
    fg = np.zeros(pair.source.dims, dtype=bool)
    fg[1, 2, 3] = True
    patches = sample_training_patches(pair, Mask(fg), n=4, seed=0)
    for s, _ in patches:
        assert np.array_equal(s, pair.source.data)  # clamped to origin (0,0,0)


def test_sample_requires_foreground_and_size():
    pair = _pair_with_fg()
    with pytest.raises(NoForegroundError):
        sample_training_patches(pair, Mask.empty(pair.source.dims), n=1, seed=0)
    small = PreprocessedPair(
        Volume(np.zeros((32, 96, 96), np.float32), (1, 1, 1)),
        Volume(np.zeros((32, 96, 96), np.float32), (1, 1, 1)),
    )
    with pytest.raises(ShapeError):
        sample_training_patches(small, Mask.full((32, 96, 96)), n=1, seed=0)


def test_sample_deterministic_under_seed():
    pair = _pair_with_fg()
    fg = Mask(pair.source.data > 0.0)
    a = sample_training_patches(pair, fg, n=5, seed=123)
    b = sample_training_patches(pair, fg, n=5, seed=123)
    for (s1, t1), (s2, t2) in zip(a, b):
        assert np.array_equal(s1, s2) and np.array_equal(t1, t2)


def test_center_distribution_uniform_chi_square():
    fg = np.zeros((10, 10, 10), dtype=bool)
    rng = np.random.default_rng(42)
    idx = rng.choice(1000, size=40, replace=False)
    fg.flat[idx] = True
    mask = Mask(fg)
    n = 10_000
    centers = draw_patch_centers(mask, n, seed=7)
    eligible = list(zip(*np.nonzero(fg)))
    counts = {tuple(int(i) for i in e): 0 for e in eligible}
    for c in centers:
        counts[c] += 1
    k = len(eligible)
    expected = n / k
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    dof = k - 1
    assert abs(chi2 - dof) < 3 * math.sqrt(2 * dof)
