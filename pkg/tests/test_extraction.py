import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beamsquint.channel import ArrayConfig, ConfigurationError, OfdmConfig, UserChannel, channel_basis_p
from beamsquint.extraction import (DescentConfig, ExtractionConfig, ExtractionContext, ExtractionState, beta_star,
                                   descend_psi_tau, extract, lambda_update, log_sum_J0, objective_J_lambda,
                                   prune_paths, surrogate_gradient, surrogate_S1, weight_matrix_D, write_trace_csv)
from beamsquint.frontend import HybridDims, NoiseModel, random_analog_combiner, simulate_uplink_reception, \
    stack_combiners
from beamsquint.uplink import MetricScales, angle_sq_errors

from oracles import objective_dense, omp_on_grid, surrogate_dense

FC = 26e9
PILOTS = (3, 25, 47, 70, 96, 118, 140, 161, 187, 205, 230, 251)


def setup(M=32, K_rf=4, T=12, pilots=PILOTS, seed=0):
    arr = ArrayConfig(M, 0.5, FC)
    ofdm = OfdmConfig(256, 600e6)
    W = stack_combiners(random_analog_combiner(HybridDims(K_rf, T, len(pilots)), M, seed), pilots)
    return arr, ofdm, W, ExtractionContext(arr, ofdm, pilots)


def identity_combiner(M, pilots):
    from beamsquint.frontend import StackedCombiner
    return StackedCombiner(tuple(pilots), np.stack([np.eye(M, dtype=complex)] * len(pilots)), M)


# -- scalar pieces ------------------------------------------------------------------

def test_log_sum_examples():
    assert log_sum_J0(np.zeros(3), 1.0) == 0.0
    assert log_sum_J0([1.0], 1.0) == pytest.approx(math.log(2))
    assert log_sum_J0([1.0, 2j], 0.5) == pytest.approx(math.log(1.5) + math.log(4.5))
    with pytest.raises(ConfigurationError):
        log_sum_J0([1.0], 0.0)


def test_weight_matrix_examples():
    assert np.array_equal(weight_matrix_D([0.0], 1.0), np.eye(1))
    assert np.allclose(weight_matrix_D([1.0], 1.0), [[0.5]])


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=2, max_size=10), st.floats(1e-8, 1.0))
def test_weight_matrix_decreases_with_gain(mags, eps):
    mags = np.sort(np.asarray(mags))
    d = np.diag(weight_matrix_D(mags, eps))
    assert np.all(np.diff(d) <= 0)


def test_lambda_update_examples():
    assert lambda_update(1e30, 1.0, 1e-3) == 1e-3
    assert lambda_update(1.0 / 1e-3, 1.0, 1e-3) == pytest.approx(1e-3)
    assert lambda_update(0.01, 1.0, 1.0) == pytest.approx(100.0)
    assert lambda_update(0.0, 2.0, 1.0) == 2e12
    with pytest.raises(ConfigurationError):
        lambda_update(-1.0, 1.0, 1.0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ExtractionConfig(max_paths=0)
    with pytest.raises(ConfigurationError):
        ExtractionConfig(epsilon_min=2.0)
    with pytest.raises(ConfigurationError):
        ExtractionConfig(lambda0=-1.0)
    with pytest.raises(ConfigurationError):
        ExtractionConfig(init_candidates=0)
    assert ExtractionConfig().lambda0_for(576) == 144.0
    with pytest.raises(ConfigurationError):
        ExtractionState([1.0], [0.1, 0.2], [0.0])


# -- objective and surrogate ----------------------------------------------------------

def test_objective_examples():
    arr, ofdm, W, ctx = setup(M=8, K_rf=2, T=2, pilots=(1, 5))
    y0 = np.zeros(W.num_measurements)
    assert objective_J_lambda([0.1], [0.0], [0.0], y0, W, 3.0, 1.0, ctx) == 0.0
    beta = np.array([0.7 - 0.1j, 0.2j])
    psi, tau = [0.12, -0.3], [10e-9, 60e-9]
    u = UserChannel.from_arrays(psi, tau, beta)
    y = simulate_uplink_reception(u, W, NoiseModel(), arr, ofdm)
    assert objective_J_lambda(psi, tau, beta, y, W, 5.0, 0.3, ctx) == pytest.approx(log_sum_J0(beta, 0.3))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 20))
def test_objective_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    arr, ofdm, W, ctx = setup(M=8, K_rf=2, T=3, pilots=(2, 9, 30), seed=seed)
    L = int(rng.integers(1, 4))
    psi = rng.uniform(-0.5, 0.5, L)
    tau = rng.uniform(0, 300e-9, L)
    beta = rng.standard_normal(L) + 1j * rng.standard_normal(L)
    y = rng.standard_normal(W.num_measurements) + 1j * rng.standard_normal(W.num_measurements)
    lam, eps = float(rng.uniform(0.1, 10)), float(rng.uniform(1e-3, 1))
    ref = objective_dense(psi, tau, beta, y, W.blocks, lam, eps, ctx.pilots, 8, FC, ofdm.eta)
    assert objective_J_lambda(psi, tau, beta, y, W, lam, eps, ctx) == pytest.approx(ref, rel=1e-10)
    D = weight_matrix_D(beta, eps)
    sref = surrogate_dense(psi, tau, y, W.blocks, lam, D, ctx.pilots, 8, FC, ofdm.eta)
    assert surrogate_S1(psi, tau, y, W, lam, D, ctx) == pytest.approx(sref, rel=1e-9)


def test_surrogate_one_path_closed_form():
    M = 8
    pilots = (1, 4, 20)
    arr, ofdm = ArrayConfig(M, 0.5, FC), OfdmConfig(64, 600e6)
    W = identity_combiner(M, pilots)
    ctx = ExtractionContext(arr, ofdm, pilots)
    rng = np.random.default_rng(2)
    y = rng.standard_normal(M * 3) + 1j * rng.standard_normal(M * 3)
    p = channel_basis_p(0.2, 40e-9, pilots, arr, ofdm)
    D = np.array([[1.7]])
    lam = 0.4
    expected = -abs(np.vdot(p, y)) ** 2 / (M * 3 + 1.7 / lam)
    assert surrogate_S1([0.2], [40e-9], y, W, lam, D, ctx) == pytest.approx(expected, rel=1e-12)
    assert surrogate_S1([0.2], [40e-9], np.zeros_like(y), W, lam, D, ctx) == 0.0
    assert np.array_equal(beta_star([0.2], [40e-9], np.zeros_like(y), W, lam, D, ctx), [0])


def test_surrogate_minimal_at_truth():
    arr, ofdm, W, ctx = setup()
    u = UserChannel.from_arrays([0.17], [55e-9], [1.0])
    y = simulate_uplink_reception(u, W, NoiseModel(), arr, ofdm)
    D, lam = np.eye(1), 10.0
    s0 = surrogate_S1([0.17], [55e-9], y, W, lam, D, ctx)
    for dp in (-2e-3, -5e-4, 5e-4, 2e-3):
        for dt in (-2e-9, 0.0, 2e-9):
            if dp or dt:
                assert surrogate_S1([0.17 + dp], [55e-9 + dt], y, W, lam, D, ctx) > s0


def test_beta_star_large_lambda_recovers_gain():
    arr, ofdm, W, ctx = setup()
    alpha = 0.8 - 0.35j
    u = UserChannel.from_arrays([-0.22], [120e-9], [alpha])
    y = simulate_uplink_reception(u, W, NoiseModel(), arr, ofdm)
    b = beta_star([-0.22], [120e-9], y, W, 1e12, np.eye(1), ctx)
    assert abs(b[0] - alpha) < 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 20))
def test_surrogate_value_consistent_with_beta_star(seed):
    rng = np.random.default_rng(seed)
    arr, ofdm, W, ctx = setup(M=16, T=4, seed=seed)
    L = 2
    psi, tau = rng.uniform(-0.5, 0.5, L), rng.uniform(0, 3e-7, L)
    y = rng.standard_normal(W.num_measurements) + 1j * rng.standard_normal(W.num_measurements)
    D, lam = np.diag(rng.uniform(0.1, 2, L)), float(rng.uniform(0.5, 5))
    b = beta_star(psi, tau, y, W, lam, D, ctx)
    from beamsquint.channel import basis_matrix_P
    A = W.adjoint(basis_matrix_P(list(zip(psi, tau)), ctx.pilots, arr, ofdm))
    s = -np.real(np.vdot(A.conj().T @ y, b))
    assert surrogate_S1(psi, tau, y, W, lam, D, ctx) == pytest.approx(s, rel=1e-9)


# -- gradient ---------------------------------------------------------------------------

def _fd_gradient(psi, tau, y, W, lam, D, ctx, Ts):
    h_psi, h_tau = 1e-6, 1e-6 * Ts
    gp, gt = np.zeros(len(psi)), np.zeros(len(psi))
    for l in range(len(psi)):
        e = np.zeros(len(psi))
        e[l] = 1.0
        gp[l] = (surrogate_S1(psi + h_psi * e, tau, y, W, lam, D, ctx)
                 - surrogate_S1(psi - h_psi * e, tau, y, W, lam, D, ctx)) / (2 * h_psi)
        gt[l] = (surrogate_S1(psi, tau + h_tau * e, y, W, lam, D, ctx)
                 - surrogate_S1(psi, tau - h_tau * e, y, W, lam, D, ctx)) / (2 * h_tau)
    return gp, gt


def test_gradient_matches_finite_differences_on_random_instances():
    arr, ofdm, W, ctx = setup(M=16, T=6)
    Ts = ofdm.sample_period_s
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(100):
        L = int(rng.integers(1, 4))
        psi, tau = rng.uniform(-0.5, 0.5, L), rng.uniform(0, 3e-7, L)
        u = UserChannel.from_arrays(psi + rng.normal(0, 0.01, L), np.abs(tau + rng.normal(0, 5e-9, L)),
                                    rng.standard_normal(L) + 1j * rng.standard_normal(L))
        y = simulate_uplink_reception(u, W, NoiseModel(0.05), arr, ofdm, rng=rng)
        D, lam = np.diag(rng.uniform(0.1, 2, L)), float(rng.uniform(0.5, 5))
        gp, gt = surrogate_gradient(psi, tau, y, W, lam, D, ctx)
        fp, ft = _fd_gradient(psi, tau, y, W, lam, D, ctx, Ts)
        g, f = np.concatenate([gp, gt * Ts]), np.concatenate([fp, ft * Ts])
        worst = max(worst, np.linalg.norm(g - f) / max(np.linalg.norm(f), 1e-12))
    assert worst < 1e-4


# -- descent ------------------------------------------------------------------------------

def test_descent_is_stationary_at_exact_fit():
    arr, ofdm, W, ctx = setup()
    u = UserChannel.from_arrays([0.05], [80e-9], [1.0])
    y = simulate_uplink_reception(u, W, NoiseModel(), arr, ofdm)
    # with a vanishing regularizer the exact parameters are a stationary point
    state = ExtractionState([1.0], [0.05], [80e-9], epsilon=1.0, lam=1e14)
    psi, tau = descend_psi_tau(state, y, W, ctx)
    assert np.allclose(psi, [0.05], atol=1e-12) and np.allclose(tau, [80e-9], atol=1e-20)


def test_descent_converges_from_perturbation():
    M = 32
    arr, ofdm, W, ctx = setup(M=M)
    u = UserChannel.from_arrays([0.21], [140e-9], [1.0])
    y = simulate_uplink_reception(u, W, NoiseModel(), arr, ofdm)
    state = ExtractionState([1.0], [0.21 + 0.3 / M], [140e-9], lam=1e6)
    for _ in range(30):
        psi, tau = descend_psi_tau(state, y, W, ctx, DescentConfig(), steps=5)
        state = ExtractionState([1.0], psi, tau, lam=1e6)
    assert abs(state.psi[0] - 0.21) < 1e-5


def test_prune_paths_cases():
    s = ExtractionState([1.0, 0.2j, 0.5], [0.1, 0.2, 0.3], [1e-9, 2e-9, 3e-9])
    assert prune_paths(s, 0.1).num_paths == 3
    assert prune_paths(s, 2.0).num_paths == 0
    kept = prune_paths(s, 0.4)
    assert np.array_equal(kept.beta, [1.0, 0.5])
    assert np.array_equal(kept.psi, [0.1, 0.3])
    assert np.array_equal(kept.tau, [1e-9, 3e-9])


# -- full extraction -----------------------------------------------------------------------

def test_extract_zero_input():
    arr, ofdm, W, ctx = setup()
    res = extract(np.zeros(W.num_measurements), W, ctx)
    assert res.num_paths == 0 and res.converged


def test_extract_noiseless_single_path():
    arr, ofdm, W, ctx = setup(M=32)
    Ts = ofdm.sample_period_s
    alpha = 0.9 * np.exp(0.7j)
    u = UserChannel.from_arrays([0.2731], [97.3e-9], [alpha])
    y = simulate_uplink_reception(u, W, NoiseModel(), arr, ofdm)
    res = extract(y, W, ctx)
    assert res.num_paths == 1
    assert abs(res.psi[0] - 0.2731) < 1e-4
    assert abs(res.tau[0] - 97.3e-9) < 0.01 * Ts
    assert abs(res.alpha[0] - alpha) / abs(alpha) < 1e-3


def test_extract_two_paths_beat_grid_floor():
    M = 64
    arr, ofdm, W, ctx = setup(M=M, seed=4)
    truth = UserChannel.from_arrays([0.1037, 0.1037 + 5 / M], [60e-9, 140e-9], [1.0, 0.8j])
    ref_power = np.mean(np.abs(truth.alpha) ** 2) * len(truth)
    sigma2 = ref_power / 10 ** (20 / 10)
    rng = np.random.default_rng(9)
    scales = MetricScales.for_system(arr, ofdm, len(PILOTS))
    errs_prop, errs_omp = [], []
    for _ in range(5):
        y = simulate_uplink_reception(truth, W, NoiseModel(sigma2), arr, ofdm, rng=rng)
        res = extract(y, W, ctx)
        assert res.num_paths == 2
        errs_prop.append(angle_sq_errors(list(zip(res.psi, res.tau)), truth, scales))
        p, t, _ = omp_on_grid(y, W.blocks, PILOTS, M, FC, ofdm.eta, ofdm.sample_period_s, 2, tau_max=450e-9)
        errs_omp.append(angle_sq_errors(list(zip(p, t)), truth, scales))
    # quantization floor of an M-point grid: uniform error over one bin
    floor = ((1 / M) ** 2 / 12) / (0.5 * math.cos(math.asin(0.2))) ** 2
    assert np.mean(errs_prop) < floor
    assert np.mean(errs_prop) < np.mean(errs_omp)


def test_extract_resolves_paths_sharing_an_angle_bin():
    # two paths 0.31 bins apart: the strongest coarse-grid peak is a delay sidelobe
    pilots = (30, 34, 48, 97, 107, 124, 137, 150, 170, 213, 230, 255)
    arr, ofdm, W, ctx = setup(M=32, pilots=pilots, seed=2)
    phases = np.exp(2j * np.pi * np.random.default_rng(2).random(3))
    tau = np.array([198.6e-9, 97.4e-9, 19.5e-9])
    u = UserChannel.from_arrays([0.276, 0.2858, -0.4124], tau, np.array([1, 0.56, 0.56]) * phases)
    res = extract(simulate_uplink_reception(u, W, NoiseModel(), arr, ofdm), W, ctx)
    assert res.num_paths == 3
    assert np.allclose(np.sort(res.tau), np.sort(tau), atol=0.01 * ofdm.sample_period_s)


def test_extraction_invariants_along_trace(tmp_path):
    arr, ofdm, W, ctx = setup(M=32, seed=2)
    rng = np.random.default_rng(5)
    u = UserChannel.from_arrays([-0.31, 0.02, 0.27], [30e-9, 110e-9, 210e-9], [1.0, 0.5, 0.5j])
    cfg = ExtractionConfig()
    for sigma2 in (0.0, 0.05):
        y = simulate_uplink_reception(u, W, NoiseModel(sigma2), arr, ofdm, rng=rng)
        res = extract(y, W, ctx, cfg)
        assert res.iterations <= cfg.max_iters
        assert res.converged or res.truncated
        eps = [r["eps"] for r in res.trace]
        lams = [r["lam"] for r in res.trace]
        Ls = [r["L"] for r in res.trace]
        assert all(a >= b for a, b in zip(eps, eps[1:]))
        assert min(lams) >= cfg.lambda_min
        assert all(a >= b for a, b in zip(Ls, Ls[1:]))
        for r in res.trace:
            stage = r["stage"]
            assert all(b <= a + 1e-9 for a, b in zip(stage, stage[1:]))
    path = tmp_path / "trace.csv"
    write_trace_csv(res.trace, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iter", "s1", "lam", "eps", "L", "gamma"]
    assert len(rows) == len(res.trace) + 1


def test_shape_errors():
    arr, ofdm, W, ctx = setup(M=8, K_rf=2, T=2, pilots=(1, 2))
    with pytest.raises(ConfigurationError):
        extract(np.zeros(3), W, ctx)
    with pytest.raises(ConfigurationError):
        extract(np.zeros(W.num_measurements), W, ExtractionContext(arr, ofdm, (1, 2, 3)))
