import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beamsquint.channel import ArrayConfig, ConfigurationError, GainStats, NumericalError, OfdmConfig, UserChannel, \
    basis_matrix_P, steering_vector
from beamsquint.downlink import (DownlinkConfig, beam_targets, build_A_orth, build_precoders,
                                 conventional_precoders, distance_downlink, dft_beams, group_users_downlink,
                                 ls_gains_downlink, mmse_gains_downlink, per_subcarrier_power, pilot_code,
                                 psi_downlink, simulate_downlink_reception, user_downlink)
from beamsquint.frontend import NoiseModel

FC, FD = 26e9, 28e9
ARR64 = ArrayConfig(64, 0.5, FD)
OFDM = OfdmConfig(256, 600e6)


def draw_separated_group(rng, n_users, M, guard, max_paths=3):
    users = []
    while len(users) < n_users:
        L = int(rng.integers(1, max_paths + 1))
        u = UserChannel.from_arrays(rng.uniform(-0.45, 0.45, L), rng.uniform(0, 3e-7, L), np.ones(L))
        if all(distance_downlink(u, v, M) >= guard for v in users):
            users.append(u)
    return users


# -- reciprocity and grouping ------------------------------------------------------------

def test_psi_downlink_examples():
    assert psi_downlink(0.26, FC, FD) == pytest.approx(0.28)
    back = psi_downlink(psi_downlink(0.26, FC, FD), FD, FC)
    assert abs(back - 0.26) < 1e-12
    with pytest.raises(ConfigurationError):
        psi_downlink(0.1, 0.0, FD)


@settings(max_examples=50, deadline=None)
@given(theta=st.floats(-math.pi / 2, math.pi / 2))
def test_angle_reciprocity(theta):
    lam_u, lam_d = 3e8 / FC, 3e8 / FD
    d = lam_u / 2
    psi_u = d / lam_u * math.sin(theta)
    psi_d = float(psi_downlink(psi_u, FC, FD))
    assert abs(math.asin(psi_u * lam_u / d) - math.asin(min(psi_d * lam_d / d, 1.0))) < 1e-12 or \
        abs(math.sin(theta)) > 1 - 1e-12


def test_user_downlink_keeps_delays():
    u = UserChannel.from_arrays([0.1, -0.2], [5e-9, 40e-9], [1, 2j])
    d = user_downlink(u, FC, FD)
    assert np.allclose(d.tau, u.tau) and np.allclose(d.alpha, u.alpha)
    assert np.allclose(d.psi, u.psi * FD / FC)
    assert np.allclose(user_downlink(u, FC, FD, alpha=[0, 0]).alpha, 0)


def test_distance_downlink_examples():
    a, b = UserChannel.from_arrays([0.10], [0], [1]), UserChannel.from_arrays([0.11], [0], [1])
    assert distance_downlink(a, b, 32) == pytest.approx(0.1024)
    assert distance_downlink(a, b, 32) == distance_downlink(b, a, 32)
    with pytest.raises(ConfigurationError):
        distance_downlink(a, UserChannel(), 32)


def test_downlink_grouping_respects_guard():
    rng = np.random.default_rng(1)
    users = [UserChannel.from_arrays(rng.uniform(-0.5, 0.5, 2), [0, 0], [1, 1]) for _ in range(20)]
    groups = group_users_downlink(users, 0.4, 10, 64)
    assert sorted(k for g in groups for k in g) == list(range(20))
    for g in groups:
        assert len(g) <= 10
        assert all(distance_downlink(users[i], users[j], 64) >= 0.4 for i in g for j in g if i < j)


def test_blocks_for_covers_beams():
    cfg = DownlinkConfig(FD, num_rf=4)
    for n in (1, 4, 5, 17, 64):
        assert cfg.blocks_for(n) * 4 >= n
    assert cfg.blocks_for(5) == 2
    with pytest.raises(ConfigurationError):
        DownlinkConfig(-1.0)


# -- A_orth and the analog beams -------------------------------------------------------------

def test_A_orth_brackets_virtual_bins():
    ofdm = OfdmConfig(4, 1.0)  # negligible bandwidth: one virtual bin per path
    u = UserChannel.from_arrays([12.3 / 64], [0], [1])
    assert build_A_orth([u], [1], 64, ofdm, FD).tolist() == [12, 13]
    # duplicates collapse, negative bins wrap
    u2 = UserChannel.from_arrays([12.6 / 64, -1.5 / 64], [0, 0], [1, 1])
    assert build_A_orth([u, u2], [1], 64, ofdm, FD).tolist() == [12, 13, 62, 63]
    assert build_A_orth([UserChannel()], [1], 64, ofdm, FD).size == 0


def test_A_orth_projection_energy():
    # Two bracketing DFT beams keep at least 8/pi^2 of the energy (half-bin
    # offset worst case, large M); exact grid points keep all of it.
    rng = np.random.default_rng(2)
    pilots = tuple(sorted(rng.choice(np.arange(1, 257), 12, replace=False).tolist()))
    f = OFDM.offsets(pilots)
    worst = 1.0
    for _ in range(50):
        u = UserChannel.from_arrays(rng.uniform(-0.48, 0.48, 3), np.zeros(3), np.ones(3))
        F = dft_beams(build_A_orth([u], pilots, 64, OFDM, FD), 64)
        Q, _ = np.linalg.qr(F)
        for fq in f:
            for p in u.psi:
                a = steering_vector((1 + fq / FD) * p, 64)
                worst = min(worst, np.linalg.norm(Q.conj().T @ a) ** 2 / 64)
    assert worst >= 8 / math.pi ** 2 - 1e-3
    assert worst < 0.9  # some path lands near a half-bin offset in this draw


def test_dft_beams_orthogonal():
    F = dft_beams(np.array([0, 3, 17, 63]), 64)
    assert np.allclose(F.conj().T @ F, 64 * np.eye(4), atol=1e-9)
    assert dft_beams(np.zeros(0, int), 8).shape == (8, 0)


def test_pilot_code_rows_orthogonal():
    C = pilot_code(3, 12)
    assert np.allclose(np.abs(C), 1)
    assert np.allclose(C @ C.conj().T, 12 * np.eye(3))
    with pytest.raises(ConfigurationError):
        pilot_code(13, 12)


def test_beam_target_norm():
    u = UserChannel.from_arrays([0.2, -0.1], [10e-9, 60e-9], [1, 1])
    B = beam_targets(u, (1, 50, 200), ARR64, OFDM)
    assert B.shape == (3, 64, 2)
    assert np.allclose(np.linalg.norm(B, axis=1), 1 / math.sqrt(64))


# -- precoders -----------------------------------------------------------------------------

def test_precoder_on_grid_collapse():
    ofdm = OfdmConfig(64, 1.0)  # narrowband: the path stays on its grid point
    u = UserChannel.from_arrays([5 / 64], [30e-9], [1.0])
    pilots = (1, 2, 3, 4)
    pre = build_precoders([u], np.array([5]), pilots, ARR64, ofdm, 4)
    assert np.allclose(pre.analog.conj().T @ pre.analog, 64 * np.eye(1))
    rho = beam_targets(u, pilots, ARR64, ofdm)
    for i, q in enumerate(pilots):
        assert np.allclose(pre.transmit_vector(q), rho[i, :, 0] * pre.pilot_code[0, i], atol=1e-12)


def test_precoder_zero_users_and_bad_inputs():
    pre = build_precoders([], np.array([0, 1]), (1, 2), ARR64, OFDM, 4)
    assert all(np.allclose(w, 0) for w in pre.digital.values())
    u = UserChannel.from_arrays([0.1], [0], [1])
    with pytest.raises(ConfigurationError):
        build_precoders([u], np.zeros(0, int), (1, 2), ARR64, OFDM, 4)
    with pytest.raises(ConfigurationError):
        build_precoders([u], np.array([6]), (1, 2), ARR64, OFDM, 4, codes=[np.ones((2, 2))])


def test_precoder_blocks_and_sigma():
    rng = np.random.default_rng(3)
    users = draw_separated_group(rng, 3, 64, 0.4)
    pilots = (3, 40, 90, 150, 201, 250)
    A = build_A_orth(users, pilots, 64, OFDM, FD)
    pre = build_precoders(users, A, pilots, ARR64, OFDM, 4)
    assert pre.blocks * 4 >= pre.num_beams
    S = pre.sigma_matrix()
    assert S.shape == (64 * 6, 6)
    assert np.allclose(S[64:128, 1], pre.transmit_vector(40))


# -- reception and gain estimators ---------------------------------------------------------

def test_reception_on_grid_conjugation():
    ofdm = OfdmConfig(64, 1.0)
    alpha = 0.8 * np.exp(0.7j)
    u = UserChannel.from_arrays([7 / 64], [0.0], [alpha])
    pilots = (1, 5, 9)
    pre = build_precoders([u], build_A_orth([u], pilots, 64, ofdm, FD), pilots, ARR64, ofdm, 4)
    y = simulate_downlink_reception(u, pre, NoiseModel(), ARR64, ofdm)
    assert np.allclose(y, alpha * pre.pilot_code[0].conj(), atol=1e-12)
    assert np.allclose(ls_gains_downlink(y, pre.pilot_code), [alpha])


def test_reception_noise_variance():
    u = UserChannel.from_arrays([0.1, -0.3], [0, 0], [0, 0])
    pilots = (1, 2)
    pre = build_precoders([u], np.arange(9), pilots, ARR64, OFDM, 4)
    assert pre.blocks == 3
    rng = np.random.default_rng(4)
    n = np.concatenate([simulate_downlink_reception(u, pre, NoiseModel(0.5), ARR64, OFDM, rng=rng)
                        for _ in range(5_000)])
    assert np.var(n) == pytest.approx(0.5 * 3, rel=0.05)


def test_ls_downlink_identities():
    C = pilot_code(3, 8)
    alpha = np.array([1, -0.5j, 0.3])
    assert np.allclose(ls_gains_downlink(C.conj().T @ alpha, C), alpha)
    assert np.allclose(ls_gains_downlink(C.conj().T @ alpha, C, 2), alpha[:2])
    assert np.allclose(np.linalg.pinv(C.conj().T), C / 8)
    with pytest.raises(NumericalError):
        ls_gains_downlink(np.ones(4), np.ones((2, 4)))


def test_ls_downlink_single_path_matches_retention_oracle():
    """A lone path sees ``y_q = alpha e_q conj(c_q)`` with ``e_q = |P_F a_q|^2 / M``,
    so LS returns ``alpha`` times the pilot-averaged retention."""
    rng = np.random.default_rng(5)
    errs = []
    for _ in range(30):
        u = UserChannel.from_arrays(rng.uniform(-0.45, 0.45, 1), rng.uniform(0, 3e-7, 1),
                                    rng.standard_normal(1) + 1j * rng.standard_normal(1))
        pilots = tuple(sorted(rng.choice(np.arange(1, 257), 12, replace=False).tolist()))
        pre = build_precoders([u], build_A_orth([u], pilots, 64, OFDM, FD), pilots, ARR64, OFDM, 4)
        Q, _ = np.linalg.qr(pre.analog)
        e = [np.linalg.norm(Q.conj().T @ steering_vector((1 + f / FD) * u.psi[0], 64)) ** 2 / 64
             for f in OFDM.offsets(pilots)]
        y = simulate_downlink_reception(u, pre, NoiseModel(), ARR64, OFDM)
        a = ls_gains_downlink(y, pre.pilot_code)
        assert np.allclose(a, u.alpha * np.mean(e), rtol=1e-9)
        errs.append(abs(a[0] - u.alpha[0]) / abs(u.alpha[0]))
    assert max(errs) <= 1 - 8 / math.pi ** 2 + 1e-3


def test_mmse_downlink_limits():
    rng = np.random.default_rng(6)
    u = draw_separated_group(rng, 1, 64, 0.4)[0]
    pilots = (1, 30, 60, 90, 120, 150)
    pre = build_precoders([u], build_A_orth([u], pilots, 64, OFDM, FD), pilots, ARR64, OFDM, 4)
    stats = GainStats(np.ones(len(u)))
    S = pre.sigma_matrix()
    args = (ARR64, OFDM, pilots)
    assert np.allclose(mmse_gains_downlink(np.zeros(6), u, stats, S, 1.0, pre.blocks, *args), 0)
    y = simulate_downlink_reception(u, pre, NoiseModel(), ARR64, OFDM)
    assert np.max(np.abs(mmse_gains_downlink(y, u, stats, S, 1e12, pre.blocks, *args))) < 1e-6
    with pytest.raises(ConfigurationError):
        mmse_gains_downlink(y, u, GainStats(np.ones(len(u) + 1)), S, 1.0, pre.blocks, *args)


def test_mmse_downlink_beats_ls():
    """Paired Monte Carlo, 10-user groups at 0 dB."""
    rng = np.random.default_rng(7)
    P = 12
    err_ls = err_mmse = 0.0
    for _ in range(500):
        users = draw_separated_group(rng, 10, 64, 0.4)
        pilots = tuple(sorted(rng.choice(np.arange(1, 257), P, replace=False).tolist()))
        pre = build_precoders(users, build_A_orth(users, pilots, 64, OFDM, FD), pilots, ARR64, OFDM, 4)
        S = pre.sigma_matrix()
        for u in users:
            lam = np.ones(len(u)) / len(u)
            u = u.with_gains(np.sqrt(lam / 2) * (rng.standard_normal(len(u)) + 1j * rng.standard_normal(len(u))))
            sigma2 = 1.0 / pre.blocks  # 0 dB relative to unit path-sum power
            y = simulate_downlink_reception(u, pre, NoiseModel(sigma2), ARR64, OFDM, rng=rng)
            a_mm = mmse_gains_downlink(y, u, GainStats(lam), S, sigma2, pre.blocks, ARR64, OFDM, pilots)
            a_ls = ls_gains_downlink(y, pre.pilot_code, len(u))
            err_mmse += np.sum(np.abs(a_mm - u.alpha) ** 2)
            err_ls += np.sum(np.abs(a_ls - u.alpha) ** 2)
    assert err_mmse <= err_ls


def test_reconstruction_identity_with_true_gains():
    u = UserChannel.from_arrays([0.2, -0.1], [10e-9, 60e-9], [1 - 1j, 0.4])
    subs = tuple(range(1, 257, 5))
    PD = basis_matrix_P(u, subs, ARR64, OFDM)
    ref = np.concatenate([sum(a * np.exp(-2j * np.pi * OFDM.offsets([q])[0] * t)
                              * steering_vector((1 + OFDM.offsets([q])[0] / FD) * p, 64)
                              for p, t, a in zip(u.psi, u.tau, u.alpha)) for q in subs])
    assert np.allclose(PD @ u.alpha, ref, atol=1e-10)


# -- per-subcarrier power --------------------------------------------------------------

def test_power_zero_channel():
    u = UserChannel.from_arrays([0.1], [0], [0.0])
    pre = build_precoders([u], np.array([6, 7]), (1, 2), ARR64, OFDM, 4)
    assert np.allclose(per_subcarrier_power(u, pre, ARR64, OFDM), 0)


def test_power_flat_for_on_grid_path():
    M, fc = 128, 28e9
    arr = ArrayConfig(M, 0.5, fc)
    ofdm = OfdmConfig(256, 0.032 * fc)
    u = UserChannel.from_arrays([20 / M], [50e-9], [1.0])
    subs = ofdm.all_indices()
    A = build_A_orth([u], subs, M, ofdm, fc)
    pp = per_subcarrier_power(u, build_precoders([u], A, (1,), arr, ofdm, 4, codes=[u.alpha],
                                                 subcarriers=subs), arr, ofdm)
    assert 10 * np.log10(pp.max() / pp.min()) < 3.0


def _three_path_channel(phases=(0.0, 1.0, 2.0)):
    psi = 0.5 * np.sin(np.deg2rad([75, 25, -20]))
    alpha = np.array([1, 10 ** (-5 / 20), 10 ** (-5 / 20)]) * np.exp(1j * np.array(phases))
    return UserChannel.from_arrays(psi, [20e-9, 90e-9, 160e-9], alpha)


def test_power_spread_three_path_channel():
    M, fc = 128, 28e9
    arr, ofdm = ArrayConfig(M, 0.5, fc), OfdmConfig(256, 900e6)
    u = _three_path_channel()
    subs = ofdm.all_indices()
    A = build_A_orth([u], subs, M, ofdm, fc)
    pp = per_subcarrier_power(u, build_precoders([u], A, (1,), arr, ofdm, 4, codes=[u.alpha], subcarriers=subs),
                              arr, ofdm)
    pc = per_subcarrier_power(u, conventional_precoders([u], (1,), arr, ofdm, 4, codes=[u.alpha],
                                                        subcarriers=subs), arr, ofdm)
    assert 10 * np.log10(pc.max() / pc.min()) >= 10.0
    assert 10 * np.log10(pp.max() / pp.min()) <= 3.0


def test_min_power_dominance_ensemble():
    M, fc = 64, 28e9
    arr, ofdm = ArrayConfig(M, 0.5, fc), OfdmConfig(256, 1.5e9)
    subs = tuple(range(1, 257, 8))
    rng = np.random.default_rng(8)
    prop, conv = [], []
    for _ in range(100):
        u = draw_separated_group(rng, 1, M, 0.4)[0]
        u = u.with_gains(rng.standard_normal(len(u)) + 1j * rng.standard_normal(len(u)))
        A = build_A_orth([u], subs, M, ofdm, fc)
        pre = build_precoders([u], A, (1,), arr, ofdm, 4, codes=[u.alpha], subcarriers=subs)
        cv = conventional_precoders([u], (1,), arr, ofdm, 4, codes=[u.alpha], subcarriers=subs)
        prop.append(per_subcarrier_power(u, pre, arr, ofdm).min())
        conv.append(per_subcarrier_power(u, cv, arr, ofdm).min())
    assert np.mean(prop) >= np.mean(conv)
