import numpy as np
import pytest

from i2ibench.genproc import (
    ContractError,
    Predictor,
    bridge_forward,
    bridge_sample,
    bridge_schedule_csv,
    ddim_sample,
    ddpm_forward,
    flow_matching_target,
    flow_sample,
    make_bridge_schedule,
    make_scaled_linear_schedule,
    noise_schedule_csv,
    oracle_noise_predictor,
    oracle_target_predictor,
    oracle_velocity_predictor,
    toy_decode,
    toy_encode,
)
from i2ibench.volume import ParameterError, ShapeError


def latent(seed=0, shape=(3, 6, 6, 6)):
    return np.random.default_rng(seed).normal(size=shape)


# --- toy codec -----------------------------------------------------------

def test_codec_constant_roundtrip():
    patch = np.full((96, 96, 96), 2.5, dtype=np.float32)
    z = toy_encode(patch)
    assert z.shape == (3, 24, 24, 24)
    assert np.abs(z - 2.5).max() < 1e-6
    back = toy_decode(z)
    assert np.abs(back - 2.5).max() < 1e-6


def test_codec_block_mean():
    patch = np.zeros((4, 4, 4), dtype=np.float64)
    patch.flat = np.arange(64)
    z = toy_encode(patch)
    assert z.shape == (3, 1, 1, 1)
    assert z[0, 0, 0, 0] == pytest.approx(31.5)


def test_codec_equals_blockwise_mean_field():
    rng = np.random.default_rng(1)
    patch = rng.normal(size=(8, 8, 8))
    back = toy_decode(toy_encode(patch))
    for bx in range(2):
        for by in range(2):
            for bz in range(2):
                block = patch[bx * 4 : bx * 4 + 4, by * 4 : by * 4 + 4, bz * 4 : bz * 4 + 4]
                assert np.abs(back[bx * 4, by * 4, bz * 4] - block.mean()) < 1e-6


def test_codec_rejects_indivisible_dims():
    with pytest.raises(ShapeError):
        toy_encode(np.zeros((5, 4, 4)))


# --- schedules -----------------------------------------------------------

def test_scaled_linear_endpoints_exact():
    sched = make_scaled_linear_schedule()
    assert sched.betas[0] == 0.0015
    assert sched.betas[999] == 0.0205
    assert sched.T == 1000


def test_alpha_bars_monotone_and_first_value():
    sched = make_scaled_linear_schedule()
    assert sched.alpha_bars[0] == pytest.approx(0.9985, abs=1e-15)
    assert (np.diff(sched.alpha_bars) < 0).all()
    assert (np.diff(sched.betas) > 0).all()
    assert ((sched.betas > 0) & (sched.betas < 1)).all()


def test_schedule_complementarity():
    sched = make_scaled_linear_schedule()
    s = np.sqrt(sched.alpha_bars) ** 2 + np.sqrt(1 - sched.alpha_bars) ** 2
    assert np.abs(s - 1.0).max() < 1e-12


def test_degenerate_single_step_schedule():
    sched = make_scaled_linear_schedule(T=1)
    assert sched.T == 1
    assert sched.betas[0] == 0.0015


def test_schedule_invalid_bounds():
    with pytest.raises(ParameterError):
        make_scaled_linear_schedule(beta_start=0.5, beta_end=0.1)
    with pytest.raises(ParameterError):
        make_scaled_linear_schedule(beta_start=0.0)


def test_bridge_schedule_shape():
    sched = make_bridge_schedule()
    assert sched.m[0] == 0.001
    assert sched.m[-1] == 0.999
    assert (np.diff(sched.m) > 0).all()
    assert sched.sigma2.min() >= 0
    assert sched.sigma2[0] < 2.1e-3 and sched.sigma2[-1] < 2.1e-3
    peak = int(np.argmax(sched.sigma2))
    assert abs(sched.m[peak] - 0.5) < 1e-3  # maximal nearest the midpoint
    # sigma^2(m) = 2(m - m^2) symmetric about 0.5, zero at the ends
    m = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    s2 = 2 * (m - m * m)
    assert s2[0] == 0.0 and s2[-1] == 0.0
    assert s2[1] == s2[3]


def test_schedule_csv_export():
    text = noise_schedule_csv(make_scaled_linear_schedule(T=4))
    lines = text.strip().splitlines()
    assert lines[0] == "t,beta,alpha_bar"
    assert len(lines) == 5
    text = bridge_schedule_csv(make_bridge_schedule(T=3))
    assert text.splitlines()[0] == "t,m,sigma2"


# --- DDPM forward --------------------------------------------------------

def test_ddpm_forward_branches():
    sched = make_scaled_linear_schedule()
    z0 = latent(0)
    zeros = np.zeros_like(z0)
    t = 400
    ab = sched.alpha_bars[t]
    assert np.allclose(ddpm_forward(z0, t, zeros, sched), np.sqrt(ab) * z0)
    eps = latent(1)
    assert np.allclose(ddpm_forward(zeros, t, eps, sched), np.sqrt(1 - ab) * eps)
    with pytest.raises(IndexError):
        ddpm_forward(z0, 1000, zeros, sched)
    with pytest.raises(ShapeError):
        ddpm_forward(z0, 1, np.zeros((1, 2, 2, 2)), sched)


def test_ddpm_forward_variance_monte_carlo():
    sched = make_scaled_linear_schedule()
    t = 700
    rng = np.random.default_rng(5)
    z0 = np.zeros(1000)
    samples = np.concatenate(
        [ddpm_forward(z0, t, rng.standard_normal(1000), sched) for _ in range(100)]
    )
    assert samples.size == 100_000
    var = samples.var()
    expected = 1.0 - sched.alpha_bars[t]
    assert abs(var - expected) / expected < 0.02


# --- DDIM ----------------------------------------------------------------

def test_ddim_oracle_recovers_target():
    sched = make_scaled_linear_schedule()
    z_star = latent(2)
    out = ddim_sample(np.zeros_like(z_star), oracle_noise_predictor(z_star, sched),
                      sched, steps=50, seed=3)
    assert np.abs(out - z_star).max() < 1e-4


def test_ddim_single_step_oracle():
    sched = make_scaled_linear_schedule()
    z_star = latent(4)
    out = ddim_sample(np.zeros_like(z_star), oracle_noise_predictor(z_star, sched),
                      sched, steps=1, seed=3)
    assert np.abs(out - z_star).max() < 1e-8


def test_ddim_zero_predictor_matches_scalar_recursion():
    sched = make_scaled_linear_schedule()
    steps, seed = 50, 11
    zero_pred = Predictor("noise", lambda z, t, c: np.zeros_like(z))
    out = ddim_sample(np.zeros((2, 3, 3, 3)), zero_pred, sched, steps=steps, seed=seed)
    # independent scalar recursion over the same evenly spaced sub-schedule
    ts = np.unique(np.round(np.linspace(sched.T - 1, 0, steps)).astype(int))[::-1]
    z = np.random.Generator(np.random.PCG64(seed)).standard_normal((2, 3, 3, 3))
    factor = 1.0
    for i, t in enumerate(ts):
        ab_t = sched.alpha_bars[t]
        ab_prev = sched.alpha_bars[ts[i + 1]] if i + 1 < len(ts) else 1.0
        factor *= np.sqrt(ab_prev) / np.sqrt(ab_t)
    assert np.abs(out - z * factor).max() < 1e-6


def test_ddim_contract_and_determinism():
    sched = make_scaled_linear_schedule()
    with pytest.raises(ContractError):
        ddim_sample(latent(0), oracle_target_predictor(latent(0)), sched)
    z_star = latent(5)
    pred = oracle_noise_predictor(z_star, sched)
    a = ddim_sample(np.zeros_like(z_star), pred, sched, steps=10, seed=21)
    b = ddim_sample(np.zeros_like(z_star), pred, sched, steps=10, seed=21)
    assert np.array_equal(a, b)


# --- bridge --------------------------------------------------------------

def test_bridge_forward_midpoint():
    sched = make_bridge_schedule()
    t = int(np.argmin(np.abs(sched.m - 0.5)))
    m = sched.m[t]
    z0, z_y = latent(6), latent(7)
    out = bridge_forward(z0, z_y, t, None, sched)
    assert np.abs(out - ((1 - m) * z0 + m * z_y)).max() < 1e-12
    assert 2 * (0.5 - 0.25) == 0.5  # sigma^2 at m = 0.5


def test_bridge_forward_first_step_near_target():
    sched = make_bridge_schedule()
    z0, z_y = latent(8), latent(9)
    out = bridge_forward(z0, z_y, 0, None, sched)
    assert np.abs(out - (0.999 * z0 + 0.001 * z_y)).max() < 1e-12


def test_bridge_forward_identical_endpoints():
    sched = make_bridge_schedule()
    z = latent(10)
    for t in (0, 250, 999):
        assert np.allclose(bridge_forward(z, z, t, None, sched), z)


def test_bridge_sample_oracle_exact():
    sched = make_bridge_schedule()
    z_star, z_y = latent(11), latent(12)
    out = bridge_sample(z_y, oracle_target_predictor(z_star), sched, steps=50)
    assert np.abs(out - z_star).max() < 1e-5


def test_bridge_sample_degenerate_bridge():
    sched = make_bridge_schedule()
    z_star = latent(13)
    calls = []

    def fn(z, t, c):
        calls.append(np.abs(z - z_star).max())
        return z_star

    out = bridge_sample(z_star, Predictor("target", fn), sched, steps=20)
    assert np.abs(out - z_star).max() < 1e-12
    assert max(calls) < 1e-12  # every intermediate state stays at z0*


def test_bridge_sample_stochastic_reproducible():
    sched = make_bridge_schedule()
    pred = oracle_target_predictor(latent(14))
    a = bridge_sample(latent(15), pred, sched, steps=25, seed=5, stochastic=True)
    b = bridge_sample(latent(15), pred, sched, steps=25, seed=5, stochastic=True)
    assert np.array_equal(a, b)
    with pytest.raises(ContractError):
        bridge_sample(latent(15), oracle_velocity_predictor(latent(14)), sched)


# --- flow ----------------------------------------------------------------

def test_flow_constant_velocity_exact_any_steps():
    z_src, z_tgt = latent(16), latent(17)
    for steps in (1, 3, 64):
        out = flow_sample(z_src, oracle_velocity_predictor(z_tgt), steps)
        assert np.abs(out - z_tgt).max() < 1e-12


def test_flow_zero_velocity_stationary():
    z_src = latent(18)
    pred = Predictor("velocity", lambda z, t, c: np.zeros_like(z))
    assert np.array_equal(flow_sample(z_src, pred, 10), z_src)


def test_flow_linear_field_matches_recursion():
    z_src = latent(19)
    pred = Predictor("velocity", lambda z, t, c: -z)
    out = flow_sample(z_src, pred, 100)
    assert np.abs(out - (1 - 1 / 100) ** 100 * z_src).max() < 1e-6


def test_flow_rejects_bad_steps_and_kind():
    with pytest.raises(ParameterError):
        flow_sample(latent(20), oracle_velocity_predictor(latent(20)), 0)
    with pytest.raises(ContractError):
        flow_sample(latent(20), oracle_target_predictor(latent(20)), 4)


def test_flow_matching_target_identities():
    z_src, z_tgt = latent(21), latent(22)
    z0, v0 = flow_matching_target(z_src, z_tgt, 0.0)
    assert np.array_equal(z0, z_src) and np.array_equal(v0, z_tgt - z_src)
    z1, _ = flow_matching_target(z_src, z_tgt, 1.0)
    assert np.allclose(z1, z_tgt)
    for t in (0.0, 0.3, 0.77, 1.0):
        zt, v = flow_matching_target(z_src, z_tgt, t)
        assert np.abs(zt + (1 - t) * v - z_tgt).max() < 1e-12
    with pytest.raises(ParameterError):
        flow_matching_target(z_src, z_tgt, 1.5)
