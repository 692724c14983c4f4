"""Hybrid analog/digital combiners and uplink pilot reception ``y = W^H h + n``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.linalg

from .channel import ArrayConfig, ConfigurationError, OfdmConfig, UserChannel, stacked_channel


@dataclass(frozen=True)
class HybridDims:
    num_rf: int
    blocks_up: int
    num_pilots: int

    def __post_init__(self):
        for name in ("num_rf", "blocks_up", "num_pilots"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {v}")

    @property
    def measurements_per_pilot(self) -> int:
        return self.num_rf * self.blocks_up


@dataclass(frozen=True)
class NoiseModel:
    sigma2: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise ConfigurationError(f"sigma2 must be non-negative, got {self.sigma2}")


def complex_normal(rng: np.random.Generator, shape, variance: float) -> np.ndarray:
    """i.i.d. CN(0, variance) samples."""
    scale = np.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


@dataclass(frozen=True)
class CombinerSet:
    """Analog combiners ``W_RF,b`` (one per training block) and digital ``W_BB,q,b``.

    ``digital=None`` means identity digital combiners on every subcarrier.
    """
    analog: np.ndarray  # (T_up, M, N_RF)
    digital: Optional[Mapping[tuple[int, int], np.ndarray]] = None

    @property
    def num_blocks(self) -> int:
        return self.analog.shape[0]

    @property
    def num_antennas(self) -> int:
        return self.analog.shape[1]

    @property
    def num_rf(self) -> int:
        return self.analog.shape[2]

    def composite(self, q: int, b: int) -> np.ndarray:
        """``W_{q,b} = W_RF,b W_BB,q,b`` for 1-based block index ``b``."""
        W_rf = self.analog[b - 1]
        if self.digital is None:
            return W_rf
        try:
            W_bb = self.digital[(q, b)]
        except KeyError:
            raise ConfigurationError(f"no digital combiner for subcarrier {q}, block {b}") from None
        return W_rf @ W_bb


def random_analog_combiner(dims: HybridDims, M: int, seed: int) -> CombinerSet:
    """Random phase-shifter combiners with entries ``exp(j phi) / sqrt(M)``."""
    if dims.num_rf > M:
        raise ConfigurationError(f"num_rf={dims.num_rf} exceeds num_antennas={M}")
    rng = np.random.default_rng(seed)
    phi = rng.uniform(0.0, 2 * np.pi, size=(dims.blocks_up, M, dims.num_rf))
    return CombinerSet(np.exp(1j * phi) / np.sqrt(M))


@dataclass(frozen=True)
class StackedCombiner:
    """Per-pilot stacked combiners.

    ``blocks[i]`` is ``W_q = [W_{q,1}, ..., W_{q,T_up}]`` for the ``i``-th
    pilot subcarrier, shape ``(M, N_RF T_up)``.  The grand block-diagonal
    ``W`` is built lazily because the estimators only need the blocks.
    """
    pilots: tuple[int, ...]
    blocks: np.ndarray  # (P, M, N_RF * T_up)
    num_rf: int

    @property
    def num_antennas(self) -> int:
        return self.blocks.shape[1]

    @property
    def num_blocks(self) -> int:
        return self.blocks.shape[2] // self.num_rf

    @property
    def num_measurements(self) -> int:
        return self.blocks.shape[0] * self.blocks.shape[2]

    @property
    def per_subcarrier(self) -> dict[int, np.ndarray]:
        return {q: self.blocks[i] for i, q in enumerate(self.pilots)}

    def block_diag_at(self, i: int) -> np.ndarray:
        """``W~_q`` for the ``i``-th pilot: block-diagonal of the ``W_{q,b}``."""
        W = self.blocks[i]
        n = self.num_rf
        return scipy.linalg.block_diag(*[W[:, b * n:(b + 1) * n] for b in range(self.num_blocks)])

    @property
    def block_diag_per_subcarrier(self) -> dict[int, np.ndarray]:
        return {q: self.block_diag_at(i) for i, q in enumerate(self.pilots)}

    @property
    def grand(self) -> np.ndarray:
        return scipy.linalg.block_diag(*self.blocks)

    def adjoint(self, h: np.ndarray) -> np.ndarray:
        """``W^H h`` for a pilot-stacked channel (antenna-fastest)."""
        P, M, _ = self.blocks.shape
        if h.ndim == 1:
            return np.einsum("pmk,pm->pk", self.blocks.conj(), h.reshape(P, M)).reshape(-1)
        return np.einsum("pmk,pml->pkl", self.blocks.conj(), h.reshape(P, M, -1)).reshape(-1, h.shape[-1])

    def forward(self, y: np.ndarray) -> np.ndarray:
        """``W y``: back-projection of measurements onto the antenna/pilot grid."""
        P, M, K = self.blocks.shape
        return np.einsum("pmk,pk->pm", self.blocks, y.reshape(P, K)).reshape(-1)


def stack_combiners(combiners: CombinerSet, pilot_indices: Sequence[int]) -> StackedCombiner:
    pilots = tuple(int(q) for q in pilot_indices)
    if not pilots:
        raise ConfigurationError("pilot set must not be empty")
    T = combiners.num_blocks
    blocks = np.stack([np.hstack([combiners.composite(q, b) for b in range(1, T + 1)]) for q in pilots])
    return StackedCombiner(pilots, blocks, combiners.num_rf)


def as_blocks(W) -> np.ndarray:
    """Accept a :class:`StackedCombiner`, a block array or a square-block grand ``W``."""
    if isinstance(W, StackedCombiner):
        return W.blocks
    W = np.asarray(W)
    if W.ndim == 3:
        return W
    raise ConfigurationError("W must be a StackedCombiner or a (P, M, K) block array")


def grand_to_blocks(W: np.ndarray, num_pilots: int) -> np.ndarray:
    """Slice the diagonal blocks out of a block-diagonal grand combiner."""
    rows, cols = W.shape
    if rows % num_pilots or cols % num_pilots:
        raise ConfigurationError(f"grand W of shape {W.shape} does not split into {num_pilots} blocks")
    M, K = rows // num_pilots, cols // num_pilots
    return np.stack([W[i * M:(i + 1) * M, i * K:(i + 1) * K] for i in range(num_pilots)])


def noise_covariance_C(stacked: StackedCombiner) -> np.ndarray:
    """Block-diagonal ``C_n`` with blocks ``W~_q^H W~_q``."""
    n = stacked.num_rf
    T = stacked.num_blocks
    parts = []
    for W in stacked.blocks:
        for b in range(T):
            Wb = W[:, b * n:(b + 1) * n]
            parts.append(Wb.conj().T @ Wb)
    return scipy.linalg.block_diag(*parts)


def reception_noise(stacked: StackedCombiner, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """Noise ``n = [W~_q^H n~_q]_q`` for i.i.d. CN(0, sigma2) antenna noise."""
    P, M, K = stacked.blocks.shape
    n, T = stacked.num_rf, stacked.num_blocks
    raw = complex_normal(rng, (P, T, M), sigma2)
    W = stacked.blocks.reshape(P, M, T, n)
    return np.einsum("pmtn,ptm->ptn", W.conj(), raw).reshape(-1)


def simulate_uplink_reception(user: UserChannel, stacked: StackedCombiner, noise: NoiseModel,
                              array: ArrayConfig, ofdm: OfdmConfig,
                              rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Pilot observations ``W^H h_k + n_k`` with unit pilot symbols."""
    h = stacked_channel(user, stacked.pilots, array, ofdm)
    y = stacked.adjoint(h)
    if noise.sigma2 > 0:
        rng = np.random.default_rng(noise.rng_seed) if rng is None else rng
        y = y + reception_noise(stacked, noise.sigma2, rng)
    return y
