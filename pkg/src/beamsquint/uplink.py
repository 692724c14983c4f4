"""Multi-user uplink: grouping, shared-pilot reception, gain re-estimation and metrics.

Once the slowly varying path parameters ``(psi, tau)`` of every user are
known, only the complex gains need to be re-estimated.  Users whose channels
are far apart in the angle-delay plane share one pilot set; LS treats the
other group members as noise while MMSE models them through their
(reconstructed) covariances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from .channel import (ArrayConfig, ConfigurationError, GainStats, NumericalError, OfdmConfig,
                      UserChannel, as_psi_tau, basis_matrix_P, full_band_basis, stacked_channel)
from .extraction import ExtractionContext
from .frontend import NoiseModel, StackedCombiner, reception_noise

ESTIMATOR_TAGS = ("LS", "MMSE-true-cov", "MMSE-reconstructed-cov")


@dataclass(frozen=True)
class UserGroupPlan:
    groups: tuple[tuple[int, ...], ...]
    pilot_assignment: Mapping[int, tuple[int, ...]]
    guard: float
    max_group_size: float  # kappa; may be inf

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(int(k) for k in g) for g in self.groups))
        members = [k for g in self.groups for k in g]
        if len(set(members)) != len(members):
            raise ConfigurationError("a user appears in more than one group")
        if any(len(g) == 0 or len(g) > self.max_group_size for g in self.groups):
            raise ConfigurationError("group size outside 1..kappa")
        used = [q for g in range(len(self.groups)) for q in self.pilot_assignment.get(g, ())]
        if len(set(used)) != len(used):
            raise ConfigurationError("pilot sets of distinct groups overlap")

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def group_of(self, user: int) -> int:
        for g, members in enumerate(self.groups):
            if user in members:
                return g
        raise KeyError(user)


@dataclass(frozen=True)
class EstimateReport:
    alpha_hat: np.ndarray
    h_hat_full: np.ndarray
    method: str

    def __post_init__(self):
        if self.method not in ESTIMATOR_TAGS:
            raise ConfigurationError(f"unknown estimator tag {self.method!r}")


def _coords_uplink(user, M: int, P: int, eta: float) -> np.ndarray:
    psi, tau = as_psi_tau(user)
    if len(psi) == 0:
        raise ConfigurationError("distance needs at least one path per user")
    return np.column_stack([M * psi, P * eta * tau])


def distance_uplink(u1, u2, M: int, P: int, eta: float) -> float:
    """Smallest angle-delay separation ``||[M dpsi, P eta dtau]||`` over all path pairs."""
    a = _coords_uplink(u1, M, P, eta)
    b = _coords_uplink(u2, M, P, eta)
    d = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    return float(d.min())


def first_fit_groups(n: int, distance, guard: float, kappa: float) -> list[list[int]]:
    """Greedy first-fit in index order: join the first group where every member is at
    least ``guard`` away and there is room, otherwise open a new group."""
    groups: list[list[int]] = []
    for k in range(n):
        for g in groups:
            if len(g) < kappa and all(distance(k, j) >= guard for j in g):
                g.append(k)
                break
        else:
            groups.append([k])
    return groups


def group_users_uplink(users: Sequence, guard: float, kappa: float, pilot_sets: Sequence[Sequence[int]],
                       M: int, eta: float) -> UserGroupPlan:
    """Partition users into pilot-sharing groups.

    ``pilot_sets`` is the budget of disjoint pilot sets; group ``g`` receives
    ``pilot_sets[g]``.  ``P`` in the distance is the size of these sets.
    """
    if kappa < 1:
        raise ConfigurationError("kappa must be at least 1")
    if not pilot_sets:
        raise ConfigurationError("no pilot sets available")
    P = len(pilot_sets[0])
    cache: dict[tuple[int, int], float] = {}

    def dist(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            cache[key] = distance_uplink(users[i], users[j], M, P, eta)
        return cache[key]

    groups = first_fit_groups(len(users), dist, guard, kappa)
    if len(groups) > len(pilot_sets):
        raise ConfigurationError(f"{len(groups)} groups need pilots but only {len(pilot_sets)} pilot sets exist")
    assignment = {g: tuple(int(q) for q in pilot_sets[g]) for g in range(len(groups))}
    return UserGroupPlan(tuple(tuple(g) for g in groups), assignment, guard, kappa)


def simulate_group_reception(group_users: Sequence[UserChannel], stacked: StackedCombiner, noise: NoiseModel,
                             array: ArrayConfig, ofdm: OfdmConfig,
                             rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """``W_g^H sum_k h_k + n_g`` on the group's shared pilots."""
    h = np.zeros(stacked.blocks.shape[0] * stacked.num_antennas, dtype=complex)
    for user in group_users:
        if len(user):
            h = h + stacked_channel(user, stacked.pilots, array, ofdm)
    y = stacked.adjoint(h)
    if noise.sigma2 > 0:
        rng = np.random.default_rng(noise.rng_seed) if rng is None else rng
        y = y + reception_noise(stacked, noise.sigma2, rng)
    return y


def _effective(W: StackedCombiner, params, ctx: ExtractionContext) -> np.ndarray:
    """``W^H P(params)`` on the context's pilots."""
    P = basis_matrix_P(params, ctx.pilots, ctx.array, ctx.ofdm, squint=ctx.squint)
    return W.adjoint(P)


def ls_gains_uplink(y_g, W_g: StackedCombiner, params_k, ctx: ExtractionContext) -> np.ndarray:
    """``(W_g^H P_k)^+ y_g`` by least squares; rank deficiency raises :class:`NumericalError`."""
    psi, _ = as_psi_tau(params_k)
    if len(psi) == 0:
        return np.zeros(0, dtype=complex)
    A = _effective(W_g, params_k, ctx)
    y_g = np.asarray(y_g, dtype=complex).reshape(-1)
    sol, _, rank, sv = scipy.linalg.lstsq(A, y_g, cond=max(A.shape) * np.finfo(float).eps,
                                          check_finite=False)
    if rank < A.shape[1]:
        raise NumericalError(f"W^H P has rank {rank} < {A.shape[1]} paths")
    return sol


def _hermitian_solve(S: np.ndarray, Y: np.ndarray, allow_floor: bool) -> np.ndarray:
    try:
        c = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(c, Y, check_finite=False)
    except np.linalg.LinAlgError:
        if not allow_floor:
            raise NumericalError("MMSE system is not positive definite") from None
    floor = 1e-12 * float(np.real(np.trace(S)))
    if floor <= 0:
        return np.zeros_like(Y)
    S = S + floor * np.eye(S.shape[0])
    c = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
    return scipy.linalg.cho_solve(c, Y, check_finite=False)


def linear_mmse(A: np.ndarray, lam: np.ndarray, y: np.ndarray, noise_var: float,
                C_n: Optional[np.ndarray] = None) -> np.ndarray:
    """``Lambda A^H (A Lambda A^H + noise_var C_n)^{-1} y`` for ``y = A alpha + n``.

    Evaluated in the path domain as
    ``Lambda^1/2 (Lambda^1/2 A^H C^-1 A Lambda^1/2 + noise_var I)^{-1} Lambda^1/2 A^H C^-1 y``,
    which stays well conditioned as ``noise_var -> 0`` and tolerates zero
    path powers.  ``noise_var = 0`` gets the trace floor of the direct form.
    """
    lam = np.asarray(lam, dtype=float)
    if A.shape[1] == 0:
        return np.zeros(0, dtype=complex)
    if C_n is None:
        CiA, Ciy = A, y
    else:
        try:
            c = scipy.linalg.cho_factor(C_n, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise NumericalError("noise covariance is not positive definite") from None
        CiA = scipy.linalg.cho_solve(c, A, check_finite=False)
        Ciy = scipy.linalg.cho_solve(c, y, check_finite=False)
    s = np.sqrt(lam)
    G = s[:, None] * (A.conj().T @ CiA) * s[None, :]
    G = 0.5 * (G + G.conj().T)
    z = s * (A.conj().T @ Ciy)
    if noise_var > 0:
        G = G + noise_var * np.eye(G.shape[0])
    return s * _hermitian_solve(G, z, allow_floor=True)


def mmse_gains_uplink(y_g, W_g: StackedCombiner, params_all_group: Sequence, gain_stats_all: Sequence[GainStats],
                      sigma2: float, C_n: Optional[np.ndarray], ctx: ExtractionContext) -> list[np.ndarray]:
    """Joint MMSE gain estimates for every member of a pilot-sharing group.

    ``alpha_k = Lambda_k P_k^H W_g (W_g^H sum_r R_r W_g + sigma2 C_n)^{-1} y_g``.
    Solved in the path domain (see :func:`linear_mmse`); with ``sigma2 = 0``
    the result is the generalized least-squares fit on the powered paths.

    Returns
    -------
    list of ndarray
        One gain vector per group member, in input order.
    """
    if sigma2 < 0:
        raise ConfigurationError("sigma2 must be non-negative")
    if len(params_all_group) != len(gain_stats_all):
        raise ConfigurationError("one GainStats per group member is required")
    y_g = np.asarray(y_g, dtype=complex).reshape(-1)
    N = y_g.size
    blocks, lams = [], []
    for params, stats in zip(params_all_group, gain_stats_all):
        psi, _ = as_psi_tau(params)
        if len(stats) != len(psi):
            raise ConfigurationError(f"{len(stats)} path powers for {len(psi)} paths")
        blocks.append(_effective(W_g, params, ctx) if len(psi) else np.zeros((N, 0), dtype=complex))
        lams.append(stats.diag)
    A = np.hstack(blocks)
    lam = np.concatenate(lams) if lams else np.zeros(0)
    est = linear_mmse(A, lam, y_g, sigma2, C_n)
    out, start = [], 0
    for b in blocks:
        out.append(est[start:start + b.shape[1]])
        start += b.shape[1]
    return out


def reconstruct_full_band(params, alpha_hat, array: ArrayConfig, ofdm: OfdmConfig,
                          squint: bool = True) -> np.ndarray:
    """``P~ alpha_hat`` stacked over all ``N_c`` subcarriers (antenna-fastest)."""
    psi, _ = as_psi_tau(params)
    if len(psi) == 0:
        return np.zeros(array.num_antennas * ofdm.num_subcarriers, dtype=complex)
    return full_band_basis(params, array, ofdm, squint=squint) @ np.asarray(alpha_hat, dtype=complex)


# -- metrics ---------------------------------------------------------------

@dataclass(frozen=True)
class Association:
    """Matching of estimated to true paths; ``pairs`` are (true, est) indices."""
    pairs: tuple[tuple[int, int], ...]
    misses: tuple[int, ...]
    false_alarms: tuple[int, ...]


@dataclass(frozen=True)
class MetricScales:
    """Resolution scales of the angle-delay plane used to associate and gate."""
    M: int
    P: int
    eta: float
    d_over_lambda: float
    sample_period_s: float
    guard: float = 5.0
    delay_period_s: float = field(default=np.inf)

    @classmethod
    def for_system(cls, array: ArrayConfig, ofdm: OfdmConfig, num_pilots: int, guard: float = 5.0):
        return cls(array.num_antennas, num_pilots, ofdm.subcarrier_spacing_hz, array.d_over_lambda,
                   ofdm.sample_period_s, guard, 1.0 / ofdm.subcarrier_spacing_hz)

    @property
    def angle_penalty(self) -> float:
        """Squared physical-angle error (rad^2) of a guard-distance miss, linearized at broadside."""
        return (self.guard / self.M / self.d_over_lambda) ** 2

    @property
    def delay_penalty(self) -> float:
        return (self.guard / (self.P * self.eta)) ** 2 / self.sample_period_s


def _delay_diff(t1, t2, period: float):
    d = np.asarray(t1) - np.asarray(t2)
    if np.isfinite(period):
        d = (d + period / 2) % period - period / 2
    return d


def associate(est, truth, scales: MetricScales) -> Association:
    """Minimum-cost assignment on the angle-delay distance; pairs beyond the guard are misses."""
    pe, te = as_psi_tau(est)
    pt, tt = as_psi_tau(truth)
    if len(pt) == 0 or len(pe) == 0:
        return Association((), tuple(range(len(pt))), tuple(range(len(pe))))
    dpsi = scales.M * (pt[:, None] - pe[None, :])
    dtau = scales.P * scales.eta * _delay_diff(tt[:, None], te[None, :], scales.delay_period_s)
    cost = np.hypot(dpsi, dtau)
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple((int(r), int(c)) for r, c in zip(rows, cols) if cost[r, c] <= scales.guard)
    matched_t = {r for r, _ in pairs}
    matched_e = {c for _, c in pairs}
    return Association(pairs, tuple(i for i in range(len(pt)) if i not in matched_t),
                       tuple(j for j in range(len(pe)) if j not in matched_e))


def angle_sq_errors(est, truth, scales: MetricScales) -> np.ndarray:
    """Per-true-path squared physical-angle error (rad^2), misses at the capped penalty."""
    pe, _ = as_psi_tau(est)
    pt, _ = as_psi_tau(truth)
    assoc = associate(est, truth, scales)
    out = np.full(len(pt), scales.angle_penalty)
    dl = scales.d_over_lambda
    for i, j in assoc.pairs:
        e = np.arcsin(np.clip(pe[j] / dl, -1, 1)) - np.arcsin(np.clip(pt[i] / dl, -1, 1))
        out[i] = min(e * e, scales.angle_penalty)
    return out


def delay_sq_errors(est, truth, scales: MetricScales) -> np.ndarray:
    """Per-true-path ``|dtau|^2 / T_s``, misses at the capped penalty."""
    _, te = as_psi_tau(est)
    _, tt = as_psi_tau(truth)
    assoc = associate(est, truth, scales)
    out = np.full(len(tt), scales.delay_penalty)
    for i, j in assoc.pairs:
        d = float(_delay_diff(te[j], tt[i], scales.delay_period_s))
        out[i] = min(d * d / scales.sample_period_s, scales.delay_penalty)
    return out


def metric_amse_angle(estimates: Sequence, truths: Sequence, scales: MetricScales) -> float:
    """Mean squared physical-angle error over all true paths of all realizations."""
    errs = [angle_sq_errors(e, t, scales) for e, t in zip(estimates, truths)]
    errs = np.concatenate(errs) if errs else np.zeros(0)
    return float(errs.mean()) if errs.size else 0.0


def metric_amse_delay(estimates: Sequence, truths: Sequence, scales: MetricScales) -> float:
    errs = [delay_sq_errors(e, t, scales) for e, t in zip(estimates, truths)]
    errs = np.concatenate(errs) if errs else np.zeros(0)
    return float(errs.mean()) if errs.size else 0.0


def metric_nmse(estimates: Sequence[np.ndarray], truths: Sequence[np.ndarray]) -> float:
    """``sum ||h_hat - h||^2 / sum ||h||^2`` over realizations."""
    num = sum(float(np.sum(np.abs(np.asarray(e) - np.asarray(t)) ** 2)) for e, t in zip(estimates, truths))
    den = sum(float(np.sum(np.abs(np.asarray(t)) ** 2)) for t in truths)
    if den == 0:
        raise ConfigurationError("NMSE undefined for all-zero true channels")
    return num / den
