"""Wideband ULA channel synthesis with frequency-dependent steering vectors.

Subcarrier ``q`` (1-based) sits at offset ``(q - 1) * eta`` above the
carrier.  A path with normalized AoA ``psi`` is seen by that subcarrier at
the virtual angle ``xi = (1 + f / f_c) * psi``; the narrowband baseline keeps
``xi = psi`` on every subcarrier.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class ConfigurationError(ValueError):
    """Invalid system configuration or out-of-range index."""


class NumericalError(ArithmeticError):
    """A linear system could not be solved to usable accuracy."""


@dataclass(frozen=True)
class ArrayConfig:
    num_antennas: int
    d_over_lambda: float
    carrier_hz: float

    def __post_init__(self):
        if int(self.num_antennas) != self.num_antennas or self.num_antennas < 1:
            raise ConfigurationError(f"num_antennas must be a positive integer, got {self.num_antennas}")
        if not self.d_over_lambda > 0:
            raise ConfigurationError(f"d_over_lambda must be positive, got {self.d_over_lambda}")
        if not self.carrier_hz > 0:
            raise ConfigurationError(f"carrier_hz must be positive, got {self.carrier_hz}")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def spacing_m(self) -> float:
        return self.d_over_lambda * self.wavelength

    def at_carrier(self, carrier_hz: float) -> "ArrayConfig":
        """Same physical array seen from another carrier (spacing in metres is kept)."""
        return ArrayConfig(self.num_antennas, self.d_over_lambda * carrier_hz / self.carrier_hz, carrier_hz)


@dataclass(frozen=True)
class OfdmConfig:
    num_subcarriers: int
    bandwidth_hz: float

    def __post_init__(self):
        if int(self.num_subcarriers) != self.num_subcarriers or self.num_subcarriers < 1:
            raise ConfigurationError(f"num_subcarriers must be a positive integer, got {self.num_subcarriers}")
        if not self.bandwidth_hz > 0:
            raise ConfigurationError(f"bandwidth_hz must be positive, got {self.bandwidth_hz}")

    @property
    def subcarrier_spacing_hz(self) -> float:
        return self.bandwidth_hz / self.num_subcarriers

    eta = subcarrier_spacing_hz

    @property
    def sample_period_s(self) -> float:
        return 1.0 / self.bandwidth_hz

    def offsets(self, indices: Iterable[int]) -> np.ndarray:
        """Frequency offsets ``(q - 1) * eta`` of 1-based subcarrier indices."""
        q = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices, dtype=int)
        if q.size and (q.min() < 1 or q.max() > self.num_subcarriers):
            raise ConfigurationError(
                f"subcarrier index out of range 1..{self.num_subcarriers}: {q.min()}..{q.max()}")
        return (q - 1) * self.subcarrier_spacing_hz

    def all_indices(self) -> np.ndarray:
        return np.arange(1, self.num_subcarriers + 1)


@dataclass(frozen=True)
class PathParams:
    psi: float
    tau_s: float
    alpha: complex = 0j

    def __post_init__(self):
        if not np.isfinite(self.tau_s) or self.tau_s < 0:
            raise ConfigurationError(f"tau_s must be finite and non-negative, got {self.tau_s}")

    def physical_angle(self, d_over_lambda: float) -> float:
        return float(np.arcsin(np.clip(self.psi / d_over_lambda, -1.0, 1.0)))


@dataclass(frozen=True)
class UserChannel:
    paths: tuple[PathParams, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(self.paths))
        keys = [(p.psi, p.tau_s) for p in self.paths]
        if len(set(keys)) != len(keys):
            raise ConfigurationError("two paths share the same (psi, tau_s) pair")

    @classmethod
    def from_arrays(cls, psi, tau, alpha) -> "UserChannel":
        return cls(tuple(PathParams(float(p), float(t), complex(a)) for p, t, a in zip(psi, tau, alpha)))

    def __len__(self):
        return len(self.paths)

    @property
    def psi(self) -> np.ndarray:
        return np.array([p.psi for p in self.paths], dtype=float)

    @property
    def tau(self) -> np.ndarray:
        return np.array([p.tau_s for p in self.paths], dtype=float)

    @property
    def alpha(self) -> np.ndarray:
        return np.array([p.alpha for p in self.paths], dtype=complex)

    def with_gains(self, alpha) -> "UserChannel":
        return UserChannel.from_arrays(self.psi, self.tau, alpha)


@dataclass(frozen=True)
class GainStats:
    mean_powers: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "mean_powers", tuple(float(p) for p in self.mean_powers))
        if any(p < 0 or not np.isfinite(p) for p in self.mean_powers):
            raise ConfigurationError("mean powers must be finite and non-negative")

    def __len__(self):
        return len(self.mean_powers)

    @property
    def diag(self) -> np.ndarray:
        return np.array(self.mean_powers, dtype=float)


def as_psi_tau(params) -> tuple[np.ndarray, np.ndarray]:
    """Split path parameters into ``(psi, tau)`` float arrays.

    Accepts a :class:`UserChannel`, a sequence of :class:`PathParams`, a
    sequence of ``(psi, tau)`` pairs or an ``(L, 2)`` array.
    """
    if isinstance(params, UserChannel):
        return params.psi, params.tau
    items = list(params)
    if not items:
        return np.zeros(0), np.zeros(0)
    if isinstance(items[0], PathParams):
        return (np.array([p.psi for p in items], dtype=float),
                np.array([p.tau_s for p in items], dtype=float))
    arr = np.asarray(items, dtype=float).reshape(-1, 2)
    return arr[:, 0].copy(), arr[:, 1].copy()


def xi_of(psi, f_offset_hz, carrier_hz: float):
    """Virtual angle ``(1 + f / f_c) * psi`` seen at frequency offset ``f``."""
    return (1.0 + np.asarray(f_offset_hz) / carrier_hz) * np.asarray(psi)


def steering_vector(xi: float, M: int) -> np.ndarray:
    m = np.arange(M)
    return np.exp(-2j * np.pi * m * xi)


def basis_blocks(psi, tau, offsets, M: int, carrier_hz: float, squint: bool = True) -> np.ndarray:
    """Per-subcarrier channel atoms as an array of shape ``(P, M, L)``.

    Entry ``[i, m, l]`` is ``exp(-j2pi (m xi_l(f_i) + f_i tau_l))``.  With
    ``squint=False`` the virtual angle is pinned to ``psi``.
    """
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    f = np.asarray(offsets, dtype=float)
    scale = 1.0 + f / carrier_hz if squint else np.ones_like(f)
    m = np.arange(M, dtype=float)
    phase = (m[None, :, None] * (scale[:, None, None] * psi[None, None, :])
             + f[:, None, None] * tau[None, None, :])
    return np.exp(-2j * np.pi * phase)


def channel_at_subcarrier(user: UserChannel, q: int, array: ArrayConfig, ofdm: OfdmConfig) -> np.ndarray:
    f = ofdm.offsets([q])
    if not len(user):
        return np.zeros(array.num_antennas, dtype=complex)
    blocks = basis_blocks(user.psi, user.tau, f, array.num_antennas, array.carrier_hz)
    return blocks[0] @ user.alpha


def narrowband_channel_at_subcarrier(user: UserChannel, q: int, array: ArrayConfig,
                                     ofdm: OfdmConfig) -> np.ndarray:
    """Conventional model: frequency-flat steering, delay phase kept."""
    f = ofdm.offsets([q])
    if not len(user):
        return np.zeros(array.num_antennas, dtype=complex)
    blocks = basis_blocks(user.psi, user.tau, f, array.num_antennas, array.carrier_hz, squint=False)
    return blocks[0] @ user.alpha


def stacked_channel(user: UserChannel, subcarriers, array: ArrayConfig, ofdm: OfdmConfig,
                    squint: bool = True) -> np.ndarray:
    """Channel vectors on ``subcarriers`` stacked into one length ``M * len(subcarriers)`` vector."""
    P = basis_matrix_P(user, subcarriers, array, ofdm, squint=squint)
    if P.shape[1] == 0:
        return np.zeros(P.shape[0], dtype=complex)
    return P @ user.alpha


def channel_basis_p(psi: float, tau_s: float, pilot_indices: Sequence[int], array: ArrayConfig,
                    ofdm: OfdmConfig, squint: bool = True) -> np.ndarray:
    return basis_matrix_P([(psi, tau_s)], pilot_indices, array, ofdm, squint=squint)[:, 0]


def basis_matrix_P(params, pilot_indices: Sequence[int], array: ArrayConfig, ofdm: OfdmConfig,
                   squint: bool = True) -> np.ndarray:
    """Column-stacked channel basis, shape ``(M * P, L)``; rows run antenna-fastest."""
    pilots = list(pilot_indices)
    if not pilots:
        raise ConfigurationError("pilot set must not be empty")
    psi, tau = as_psi_tau(params)
    f = ofdm.offsets(pilots)
    M = array.num_antennas
    blocks = basis_blocks(psi, tau, f, M, array.carrier_hz, squint=squint)
    return blocks.reshape(len(pilots) * M, len(psi))


def full_band_basis(params, array: ArrayConfig, ofdm: OfdmConfig, squint: bool = True) -> np.ndarray:
    return basis_matrix_P(params, ofdm.all_indices(), array, ofdm, squint=squint)


def virtual_angle_spectrum(h: np.ndarray) -> np.ndarray:
    """``F_M^H h`` with ``F_M[m, n] = exp(-j2pi mn/M)/sqrt(M)``.

    Bin ``v`` collects energy of steering vectors with ``xi ~ v/M (mod 1)``;
    use :func:`signed_bin` to read bins in ``[-M/2, M/2)``.
    """
    h = np.asarray(h)
    return np.fft.ifft(h, norm="ortho")


def signed_bin(v, M: int):
    v = np.asarray(v)
    return (v + M // 2) % M - M // 2


def squint_span_samples(psi: float, array: ArrayConfig, ofdm: OfdmConfig) -> float:
    """Virtual-angle drift ``M psi (N_c - 1) eta / f_c`` between first and last subcarrier, in bins."""
    M = array.num_antennas
    return M * psi * (ofdm.num_subcarriers - 1) * ofdm.subcarrier_spacing_hz / array.carrier_hz


def propagation_delay(psi: float, array: ArrayConfig) -> float:
    """Delay of a plane wave across the whole aperture, ``(M - 1) d sin(theta) / c``, in seconds."""
    return (array.num_antennas - 1) * psi / array.carrier_hz


def covariance_reconstruct(params, gain_stats: GainStats, pilot_indices: Sequence[int],
                           array: ArrayConfig, ofdm: OfdmConfig, squint: bool = True) -> np.ndarray:
    """Rank-``L`` covariance ``P diag(powers) P^H`` built from path parameters."""
    psi, _ = as_psi_tau(params)
    if len(gain_stats) != len(psi):
        raise ConfigurationError(f"{len(gain_stats)} path powers given for {len(psi)} paths")
    P = basis_matrix_P(params, pilot_indices, array, ofdm, squint=squint)
    return (P * gain_stats.diag) @ P.conj().T
