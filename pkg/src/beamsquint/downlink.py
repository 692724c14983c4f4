"""FDD downlink: reciprocity mapping, squint-compensating hybrid precoding and gain estimation.

Path angles and delays carry over from the uplink (angles rescaled by the
carrier ratio); only the complex gains are trained.  The analog precoder is
a set of DFT beams bracketing every frequency-dependent virtual angle, so
per-subcarrier digital weights can steer each subcarrier to its own squinted
direction.

Conjugation convention: a user observes ``h_q^H x_q`` and works with the
conjugate of that observation, so that noiseless data read ``y = C^H alpha``
for a user whose paths all lie in the precoder span.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.linalg

from .channel import (ArrayConfig, ConfigurationError, GainStats, NumericalError, OfdmConfig, UserChannel,
                      as_psi_tau, basis_blocks, basis_matrix_P, steering_vector)
from .frontend import NoiseModel, complex_normal
from .uplink import first_fit_groups, linear_mmse


@dataclass(frozen=True)
class DownlinkConfig:
    carrier_dl_hz: float
    guard: float = 0.4
    max_group_size: float = 10
    num_rf: int = 4

    def __post_init__(self):
        if not self.carrier_dl_hz > 0:
            raise ConfigurationError("carrier_dl_hz must be positive")
        if self.num_rf < 1:
            raise ConfigurationError("num_rf must be positive")

    def blocks_for(self, num_beams: int) -> int:
        """``T_dl``: training blocks needed to sweep ``num_beams`` analog beams."""
        return max(-(-int(num_beams) // self.num_rf), 1)


def psi_downlink(psi_ul, f_c: float, f_c_D: float):
    """Normalized AoA at the downlink carrier, ``(f_c^D / f_c) psi``."""
    if not (f_c > 0 and f_c_D > 0):
        raise ConfigurationError("carriers must be positive")
    return np.asarray(psi_ul) * (f_c_D / f_c) if np.ndim(psi_ul) else float(psi_ul) * (f_c_D / f_c)


def user_downlink(user_ul, f_c: float, f_c_D: float, alpha=None) -> UserChannel:
    """Downlink counterpart of an uplink path set (same delays, rescaled angles)."""
    psi, tau = as_psi_tau(user_ul)
    if alpha is None:
        alpha = user_ul.alpha if isinstance(user_ul, UserChannel) else np.zeros(len(psi), dtype=complex)
    return UserChannel.from_arrays(psi_downlink(psi, f_c, f_c_D), tau, alpha)


def distance_downlink(u1, u2, M: int) -> float:
    """Squared angular distance ``min |M psi1 - M psi2|^2`` over path pairs (downlink angles)."""
    p1, _ = as_psi_tau(u1)
    p2, _ = as_psi_tau(u2)
    if len(p1) == 0 or len(p2) == 0:
        raise ConfigurationError("distance needs at least one path per user")
    return float(np.min((M * (p1[:, None] - p2[None, :])) ** 2))


def group_users_downlink(users_dl: Sequence, guard: float, kappa: float, M: int) -> list[list[int]]:
    """First-fit grouping with the squared angular distance compared against ``guard``."""
    cache: dict[tuple[int, int], float] = {}

    def dist(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            cache[key] = distance_downlink(users_dl[i], users_dl[j], M)
        return cache[key]

    return first_fit_groups(len(users_dl), dist, guard, kappa)


def _virtual_bins(psi_dl, subcarriers, M: int, ofdm: OfdmConfig, carrier_dl_hz: float) -> np.ndarray:
    f = ofdm.offsets(subcarriers)
    return M * (1.0 + f[:, None] / carrier_dl_hz) * np.asarray(psi_dl)[None, :]


def build_A_orth(users_dl: Sequence, subcarriers: Sequence[int], M: int, ofdm: OfdmConfig,
                 carrier_dl_hz: float) -> np.ndarray:
    """Sorted DFT-grid indices ``v`` (mod ``M``) whose beams ``a(v/M)`` bracket every
    ``M Xi^D`` over the given users, paths and subcarriers."""
    idx = []
    for u in users_dl:
        psi, _ = as_psi_tau(u)
        if len(psi) == 0:
            continue
        x = _virtual_bins(psi, subcarriers, M, ofdm, carrier_dl_hz)
        idx.append(np.floor(x).astype(int).ravel())
        idx.append(np.ceil(x).astype(int).ravel())
    if not idx:
        return np.zeros(0, dtype=int)
    return np.unique(np.mod(np.concatenate(idx), M))


def dft_beams(indices, M: int) -> np.ndarray:
    """Columns ``a(v / M)``; any two distinct indices are orthogonal."""
    return np.stack([steering_vector(v / M, M) for v in np.asarray(indices)], axis=1) \
        if len(indices) else np.zeros((M, 0), dtype=complex)


def pilot_code(num_rows: int, P: int) -> np.ndarray:
    """First ``num_rows`` rows of the ``P``-point DFT matrix (unit modulus, ``C C^H = P I``)."""
    if num_rows > P:
        raise ConfigurationError(f"need P >= number of paths, got P={P} < {num_rows}")
    l = np.arange(num_rows)[:, None]
    i = np.arange(P)[None, :]
    return np.exp(-2j * np.pi * l * i / P)


def beam_targets(user_dl, subcarriers: Sequence[int], array_dl: ArrayConfig, ofdm: OfdmConfig,
                 squint: bool = True) -> np.ndarray:
    """``rho_{q,l} = exp(-j2pi f_q tau_l) a(Xi_l^D(f_q)) / M`` as an array ``(Q, M, L)``."""
    psi, tau = as_psi_tau(user_dl)
    M = array_dl.num_antennas
    f = ofdm.offsets(subcarriers)
    return basis_blocks(psi, tau, f, M, array_dl.carrier_hz, squint=squint) / M


@dataclass(frozen=True)
class PrecoderSet:
    """Analog beams plus per-subcarrier diagonal digital weights.

    ``digital[q]`` holds ``diag(F_BB,q)``; the transmitted training vector on
    subcarrier ``q`` is ``F_RF diag(F_BB,q)`` (all-ones pilot symbols).
    """
    analog: np.ndarray  # (M, n_beams)
    digital: Mapping[int, np.ndarray]
    pilot_code: Optional[np.ndarray]  # (L_max, P); None when custom weights were supplied
    pilots: tuple[int, ...]
    num_rf: int
    beam_indices: Optional[np.ndarray] = None  # None for non-DFT (conventional) beams

    @property
    def num_beams(self) -> int:
        return self.analog.shape[1]

    @property
    def blocks(self) -> int:
        """``T_dl = ceil(n_beams / N_RF)``; unused RF slots carry zero weights."""
        return max(-(-self.num_beams // self.num_rf), 1)

    def transmit_vector(self, q: int) -> np.ndarray:
        return self.analog @ self.digital[q]

    def sigma_matrix(self, subcarriers: Optional[Sequence[int]] = None) -> np.ndarray:
        """Block-diagonal ``Sigma_g`` with the transmit vector of each pilot, shape ``(M P, P)``."""
        qs = self.pilots if subcarriers is None else tuple(subcarriers)
        return scipy.linalg.block_diag(*[self.transmit_vector(q)[:, None] for q in qs])


def _group_code(group_users_dl, pilots) -> np.ndarray:
    """Pilot code padded to the largest path count of the group."""
    L_max = max([len(as_psi_tau(u)[0]) for u in group_users_dl], default=0)
    return pilot_code(max(L_max, 1), len(pilots))


def _default_codes(group_users_dl, pilot_set, C):
    codes = []
    for u in group_users_dl:
        L = len(as_psi_tau(u)[0])
        codes.append(C[:L, :])
    return codes


def _digital_weights(analog_pinv, group_users_dl, subcarriers, codes, array_dl, ofdm, squint):
    weights = {}
    targets = [beam_targets(u, subcarriers, array_dl, ofdm, squint=squint) if len(as_psi_tau(u)[0]) else None
               for u in group_users_dl]
    for i, q in enumerate(subcarriers):
        v = np.zeros(array_dl.num_antennas, dtype=complex)
        for B, c in zip(targets, codes):
            if B is not None:
                v = v + B[i] @ c[:, i]
        weights[int(q)] = analog_pinv @ v
    return weights


def _check_codes(group_users_dl, codes, n_sub):
    out = []
    for u, c in zip(group_users_dl, codes):
        c = np.asarray(c, dtype=complex)
        L = len(as_psi_tau(u)[0])
        if c.ndim == 1:
            c = np.repeat(c[:, None], n_sub, axis=1)
        if c.shape != (L, n_sub):
            raise ConfigurationError(f"code block of shape {c.shape}, expected {(L, n_sub)}")
        out.append(c)
    return out


def build_precoders(group_users_dl: Sequence, A_orth, pilot_set: Sequence[int], array_dl: ArrayConfig,
                    ofdm: OfdmConfig, num_rf: int, codes=None,
                    subcarriers: Optional[Sequence[int]] = None) -> PrecoderSet:
    """Squint-compensating hybrid precoder for one downlink group.

    Parameters
    ----------
    group_users_dl : sequence
        Downlink path parameters of the group members.
    A_orth : array of int
        DFT-grid beam indices, see :func:`build_A_orth`.
    pilot_set : sequence of int
        The group's ``P`` pilot subcarriers.
    codes : list of arrays, optional
        Per-user weights ``(L_k, len(subcarriers))`` (or ``(L_k,)`` reused on every
        subcarrier).  By default user ``k``'s path ``l`` uses row ``l`` of the
        pilot code on the pilot subcarriers.
    subcarriers : sequence of int, optional
        Subcarriers that get digital weights; defaults to ``pilot_set``.
    """
    pilots = tuple(int(q) for q in pilot_set)
    subs = pilots if subcarriers is None else tuple(int(q) for q in subcarriers)
    M = array_dl.num_antennas
    C = _group_code(group_users_dl, pilots) if codes is None else None
    A_orth = np.asarray(A_orth, dtype=int)
    if A_orth.size == 0:
        raise ConfigurationError("A_orth is empty")
    F = dft_beams(A_orth, M)
    if codes is None:
        if subs != pilots:
            raise ConfigurationError("custom subcarriers need explicit codes")
        codes = _default_codes(group_users_dl, pilots, C)
    codes = _check_codes(group_users_dl, codes, len(subs))
    weights = _digital_weights(F.conj().T / M, group_users_dl, subs, codes, array_dl, ofdm, squint=True)
    return PrecoderSet(F, weights, C, pilots, num_rf, A_orth)


def conventional_precoders(group_users_dl: Sequence, pilot_set: Sequence[int], array_dl: ArrayConfig,
                           ofdm: OfdmConfig, num_rf: int, codes=None,
                           subcarriers: Optional[Sequence[int]] = None) -> PrecoderSet:
    """Frequency-flat baseline: one beam ``a(psi^D)`` per path, targets without squint."""
    pilots = tuple(int(q) for q in pilot_set)
    subs = pilots if subcarriers is None else tuple(int(q) for q in subcarriers)
    M = array_dl.num_antennas
    C = _group_code(group_users_dl, pilots) if codes is None else None
    psis = np.concatenate([as_psi_tau(u)[0] for u in group_users_dl]) if group_users_dl else np.zeros(0)
    if psis.size == 0:
        raise ConfigurationError("conventional precoder needs at least one path")
    F = np.stack([steering_vector(p, M) for p in psis], axis=1)
    if codes is None:
        if subs != pilots:
            raise ConfigurationError("custom subcarriers need explicit codes")
        codes = _default_codes(group_users_dl, pilots, C)
    codes = _check_codes(group_users_dl, codes, len(subs))
    weights = _digital_weights(np.linalg.pinv(F), group_users_dl, subs, codes, array_dl, ofdm, squint=False)
    return PrecoderSet(F, weights, C, pilots, num_rf, None)


def _dl_channels(user_dl: UserChannel, subcarriers, array_dl: ArrayConfig, ofdm: OfdmConfig) -> np.ndarray:
    """True downlink channels ``(Q, M)`` (always with squint)."""
    Q = len(subcarriers)
    if not len(user_dl):
        return np.zeros((Q, array_dl.num_antennas), dtype=complex)
    B = basis_blocks(user_dl.psi, user_dl.tau, ofdm.offsets(subcarriers), array_dl.num_antennas,
                     array_dl.carrier_hz)
    return B @ user_dl.alpha


def simulate_downlink_reception(user_dl: UserChannel, precoders: PrecoderSet, noise: NoiseModel,
                                array_dl: ArrayConfig, ofdm: OfdmConfig,
                                rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Conjugated pilot observations ``conj(h_q^H x_q + n_q)`` on the group's pilots.

    The noise is the sum over ``T_dl`` training blocks, so its variance is
    ``sigma2 * T_dl``.
    """
    H = _dl_channels(user_dl, precoders.pilots, array_dl, ofdm)
    X = np.stack([precoders.transmit_vector(q) for q in precoders.pilots])
    y = np.einsum("qm,qm->q", H.conj(), X)
    if noise.sigma2 > 0:
        rng = np.random.default_rng(noise.rng_seed) if rng is None else rng
        y = y + complex_normal(rng, y.shape, noise.sigma2 * precoders.blocks)
    return y.conj()


def ls_gains_downlink(y_k, C: np.ndarray, num_paths: Optional[int] = None) -> np.ndarray:
    """``(C^H)^+ y_k``; optionally truncated to the user's own ``num_paths`` rows."""
    y_k = np.asarray(y_k, dtype=complex).reshape(-1)
    CH = np.asarray(C).conj().T
    sol, _, rank, _ = scipy.linalg.lstsq(CH, y_k, check_finite=False)
    if rank < CH.shape[1]:
        raise NumericalError("pilot code has linearly dependent rows")
    return sol if num_paths is None else sol[:num_paths]


def mmse_gains_downlink(y_k, params_dl, gain_stats: GainStats, Sigma_g: np.ndarray, sigma2: float, T_dl: int,
                        array_dl: ArrayConfig, ofdm: OfdmConfig, pilots: Sequence[int],
                        squint: bool = True) -> np.ndarray:
    """``Lambda (P^D)^H Sigma_g (Sigma_g^H R^D Sigma_g + sigma2 T_dl I)^{-1} y_k``."""
    if sigma2 < 0:
        raise ConfigurationError("sigma2 must be non-negative")
    psi, _ = as_psi_tau(params_dl)
    if len(psi) == 0:
        return np.zeros(0, dtype=complex)
    if len(gain_stats) != len(psi):
        raise ConfigurationError(f"{len(gain_stats)} path powers for {len(psi)} paths")
    y_k = np.asarray(y_k, dtype=complex).reshape(-1)
    PD = basis_matrix_P(params_dl, pilots, array_dl, ofdm, squint=squint)
    A = Sigma_g.conj().T @ PD  # (P, L)
    return linear_mmse(A, gain_stats.diag, y_k, sigma2 * T_dl)


def per_subcarrier_power(user_dl: UserChannel, precoders: PrecoderSet, array_dl: ArrayConfig, ofdm: OfdmConfig,
                         subcarriers: Optional[Sequence[int]] = None) -> np.ndarray:
    """Received beamforming power ``|h_q^H F_RF diag(F_BB,q)|^2`` on each subcarrier."""
    subs = tuple(precoders.digital) if subcarriers is None else tuple(int(q) for q in subcarriers)
    H = _dl_channels(user_dl, subs, array_dl, ofdm)
    X = np.stack([precoders.transmit_vector(q) for q in subs])
    return np.abs(np.einsum("qm,qm->q", H.conj(), X)) ** 2
