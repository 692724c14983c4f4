"""Gridless extraction of per-path (AoA, delay, gain) from stacked pilot observations.

The log-sum penalized fit

    J(psi, tau, beta) = sum_l log(|beta_l|^2 + eps) + lam * ||y - W^H P(psi, tau) beta||^2

is minimized by majorization-minimization: for fixed reweighting ``D`` the
gains are eliminated in closed form, leaving the surrogate ``S1(psi, tau)``
which is decreased by a descent step on the continuous path parameters.
``eps`` is annealed towards ``epsilon_min``, ``lam`` follows the residual,
and paths whose gain falls under ``beta_min`` are dropped.

Internally delays are handled in units of the sample period so that both
coordinates are O(1); all public values are in seconds.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .channel import ArrayConfig, ConfigurationError, NumericalError, OfdmConfig, basis_blocks
from .frontend import StackedCombiner, grand_to_blocks

log = logging.getLogger(__name__)

TRACE_FIELDS = ("iter", "s1", "lam", "eps", "L", "gamma")


@dataclass(frozen=True)
class DescentConfig:
    max_line_search_steps: int = 20
    initial_step: float = 1.0
    shrink_factor: float = 0.5
    inner_steps: int = 2
    armijo: float = 1e-4
    damping: float = 1e-3


@dataclass(frozen=True)
class ExtractionConfig:
    max_paths: int = 8
    lambda0: Optional[float] = None  # None: a quarter of the number of measurements
    lambda_min: float = 1e-3
    beta_min: float = 1e-3
    gamma_T: float = 1e-6
    epsilon_init: float = 1.0
    epsilon_min: float = 1e-8
    max_iters: int = 200
    tau_max_s: float = 450e-9
    merge_distance: float = 0.3
    grid_oversampling: int = 2
    init_refine_steps: int = 10
    init_candidates: int = 3  # grid peaks refined per greedy step
    descent: DescentConfig = field(default_factory=DescentConfig)

    def __post_init__(self):
        if self.max_paths < 1:
            raise ConfigurationError("max_paths must be positive")
        if self.init_candidates < 1:
            raise ConfigurationError("init_candidates must be positive")
        if self.epsilon_min > self.epsilon_init or self.epsilon_min <= 0:
            raise ConfigurationError("need 0 < epsilon_min <= epsilon_init")
        for name in ("lambda_min", "beta_min", "gamma_T", "tau_max_s"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.lambda0 is not None and not self.lambda0 > 0:
            raise ConfigurationError("lambda0 must be positive")

    def lambda0_for(self, num_measurements: int) -> float:
        return self.lambda0 if self.lambda0 is not None else 0.25 * num_measurements


@dataclass(frozen=True)
class ExtractionContext:
    """Everything the basis needs besides the path parameters."""
    array: ArrayConfig
    ofdm: OfdmConfig
    pilots: tuple[int, ...]
    squint: bool = True

    def __post_init__(self):
        object.__setattr__(self, "pilots", tuple(int(q) for q in self.pilots))
        if not self.pilots:
            raise ConfigurationError("pilot set must not be empty")

    @property
    def offsets(self) -> np.ndarray:
        return self.ofdm.offsets(self.pilots)


@dataclass
class ExtractionState:
    beta: np.ndarray
    psi: np.ndarray
    tau: np.ndarray
    epsilon: float = 1.0
    lam: float = 1.0
    iter: int = 0

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=complex).reshape(-1)
        self.psi = np.asarray(self.psi, dtype=float).reshape(-1)
        self.tau = np.asarray(self.tau, dtype=float).reshape(-1)
        if not (len(self.beta) == len(self.psi) == len(self.tau)):
            raise ConfigurationError("beta, psi and tau must share one length")

    @property
    def num_paths(self) -> int:
        return len(self.beta)


@dataclass(frozen=True)
class ExtractionResult:
    psi: np.ndarray
    tau: np.ndarray
    alpha: np.ndarray
    trace: list
    iterations: int
    converged: bool
    truncated: bool

    @property
    def num_paths(self) -> int:
        return len(self.psi)

    def params(self) -> list[tuple[float, float]]:
        return list(zip(self.psi.tolist(), self.tau.tolist()))


def _blocks_for(W, ctx: ExtractionContext) -> np.ndarray:
    if isinstance(W, StackedCombiner):
        return W.blocks
    W = np.asarray(W)
    if W.ndim == 3:
        return W
    if W.ndim == 2:
        return grand_to_blocks(W, len(ctx.pilots))
    raise ConfigurationError(f"unsupported combiner shape {W.shape}")


def _solve_hpd(G: np.ndarray, z: np.ndarray) -> np.ndarray:
    try:
        c = scipy.linalg.cho_factor(G, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(c, z, check_finite=False)
    except np.linalg.LinAlgError:
        sol, *_ = scipy.linalg.lstsq(G, z, check_finite=False)
        if not np.all(np.isfinite(sol)):
            raise NumericalError("surrogate system is singular") from None
        return sol


def _fast_blocks(psi, tau, f, M: int, scale) -> np.ndarray:
    """Same values as :func:`basis_blocks`, with the antenna ramp split into
    coarse and fine factors so only ``O(sqrt(M))`` exponentials per atom are
    evaluated (agreement ~1e-13)."""
    b = max(int(np.sqrt(M)), 1)
    nb = -(-M // b)
    x = (-2.0 * np.pi) * scale[:, None] * psi[None, :]
    fine = np.exp(1j * np.arange(b)[None, :, None] * x[:, None, :])
    fine *= np.exp((-2j * np.pi) * f[:, None] * tau[None, :])[:, None, :]
    coarse = np.exp(1j * (b * np.arange(nb))[None, :, None] * x[:, None, :])
    out = (coarse[:, :, None, :] * fine[:, None, :, :]).reshape(len(f), nb * b, len(psi))
    return out[:, :M, :] if nb * b != M else out


class _Problem:
    """Fixed data (y, combiner, pilot offsets) of one extraction instance."""

    def __init__(self, y: np.ndarray, blocks: np.ndarray, ctx: ExtractionContext):
        P, M, K = blocks.shape
        if len(ctx.pilots) != P:
            raise ConfigurationError(f"{len(ctx.pilots)} pilots for {P} combiner blocks")
        if M != ctx.array.num_antennas:
            raise ConfigurationError(f"combiner has {M} rows, array has {ctx.array.num_antennas} antennas")
        y = np.asarray(y, dtype=complex).reshape(-1)
        if y.size != P * K:
            raise ConfigurationError(f"y has {y.size} entries, expected {P * K}")
        self.y = y
        self.P, self.M, self.K = P, M, K
        self.N = P * K
        self.WcT = np.ascontiguousarray(blocks.conj().transpose(0, 2, 1))
        self.ctx = ctx
        self.f = ctx.offsets
        self.fc = ctx.array.carrier_hz
        self.squint = ctx.squint
        self.Ts = ctx.ofdm.sample_period_s
        scale = 1.0 + self.f / self.fc if self.squint else np.ones_like(self.f)
        self._scale = scale
        m = np.arange(M, dtype=float)
        # rows K..2K give d/dpsi directly: W^H diag(-j2pi m s_p) B
        dW = self.WcT * ((-2j * np.pi) * scale[:, None, None] * m[None, None, :])
        self._WcT2 = np.ascontiguousarray(np.concatenate([self.WcT, dW], axis=1))
        self._dtau = (-2j * np.pi * self.f * self.Ts)[:, None, None]
        self._cache_key = None
        self._cache = None

    def atoms(self, psi, tau_s, derivs: bool = False):
        """``W^H P`` (and its derivatives w.r.t. psi and tau in samples)."""
        psi = np.asarray(psi, dtype=float)
        tau_s = np.asarray(tau_s, dtype=float)
        key = (psi.tobytes(), tau_s.tobytes())
        if key == self._cache_key and (not derivs or self._cache[1] is not None):
            A, dpsi, dtau = self._cache
        else:
            B = _fast_blocks(psi, tau_s * self.Ts, self.f, self.M, self._scale)
            L = B.shape[2]
            K = self.K
            if derivs:
                AD = self._WcT2 @ B
                A3 = AD[:, :K, :]
                A = A3.reshape(self.N, L)
                dpsi = AD[:, K:, :].reshape(self.N, L)
                dtau = (A3 * self._dtau).reshape(self.N, L)
            else:
                A = (self.WcT @ B).reshape(self.N, L)
                dpsi = dtau = None
            self._cache_key, self._cache = key, (A, dpsi, dtau)
        if not derivs:
            return A
        return A, dpsi, dtau

    def solve(self, A: np.ndarray, reg: np.ndarray):
        z = A.conj().T @ self.y
        G = A.conj().T @ A
        G.flat[::G.shape[0] + 1] += reg
        return _solve_hpd(G, z), z

    def surrogate(self, psi, tau_s, reg):
        if len(psi) == 0:
            return 0.0, np.zeros(0, dtype=complex)
        A = self.atoms(psi, tau_s)
        beta, z = self.solve(A, reg)
        return -float(np.real(np.vdot(z, beta))), beta

    def gradient(self, psi, tau_s, reg):
        """Surrogate value, gradient (psi, tau-in-samples) and Gauss-Newton matrix."""
        A, dP, dT = self.atoms(psi, tau_s, derivs=True)
        beta, z = self.solve(A, reg)
        s = -float(np.real(np.vdot(z, beta)))
        r = self.y - A @ beta
        J = np.hstack([dP * beta, dT * beta])
        g = -2.0 * np.real(J.conj().T @ r)
        H = 2.0 * np.real(J.conj().T @ J)
        return s, g, H, beta


def _problem(y, W, ctx) -> _Problem:
    return _Problem(y, _blocks_for(W, ctx), ctx)


def log_sum_J0(beta, epsilon: float) -> float:
    if epsilon <= 0:
        raise ConfigurationError("epsilon must be positive")
    beta = np.asarray(beta)
    return float(np.sum(np.log(np.abs(beta) ** 2 + epsilon)))


def objective_J_lambda(psi, tau, beta, y, W, lam: float, epsilon: float, ctx: ExtractionContext) -> float:
    prob = _problem(y, W, ctx)
    beta = np.asarray(beta, dtype=complex).reshape(-1)
    psi = np.asarray(psi, dtype=float).reshape(-1)
    if len(beta) != len(psi):
        raise ConfigurationError("beta and psi lengths differ")
    if len(psi):
        r = prob.y - prob.atoms(psi, np.asarray(tau, dtype=float) / prob.Ts) @ beta
    else:
        r = prob.y
    return log_sum_J0(beta, epsilon) + lam * float(np.real(np.vdot(r, r)))


def weight_matrix_D(beta, epsilon: float) -> np.ndarray:
    if epsilon <= 0:
        raise ConfigurationError("epsilon must be positive")
    return np.diag(1.0 / (np.abs(np.asarray(beta)) ** 2 + epsilon))


def _reg(lam: float, D) -> np.ndarray:
    D = np.asarray(D)
    d = np.diag(D) if D.ndim == 2 else D
    return np.real(d) / lam


def surrogate_S1(psi, tau, y, W, lam: float, D, ctx: ExtractionContext) -> float:
    """``-y^H W^H P (P^H W W^H P + D/lam)^{-1} P^H W y`` (additive constant omitted)."""
    prob = _problem(y, W, ctx)
    psi = np.asarray(psi, dtype=float).reshape(-1)
    return prob.surrogate(psi, np.asarray(tau, dtype=float).reshape(-1) / prob.Ts, _reg(lam, D))[0]


def beta_star(psi, tau, y, W, lam: float, D, ctx: ExtractionContext) -> np.ndarray:
    prob = _problem(y, W, ctx)
    psi = np.asarray(psi, dtype=float).reshape(-1)
    return prob.surrogate(psi, np.asarray(tau, dtype=float).reshape(-1) / prob.Ts, _reg(lam, D))[1]


def surrogate_gradient(psi, tau, y, W, lam: float, D, ctx: ExtractionContext):
    """Analytic ``(dS1/dpsi, dS1/dtau)``, the latter per second."""
    prob = _problem(y, W, ctx)
    psi = np.asarray(psi, dtype=float).reshape(-1)
    _, g, _, _ = prob.gradient(psi, np.asarray(tau, dtype=float).reshape(-1) / prob.Ts, _reg(lam, D))
    L = len(psi)
    return g[:L], g[L:] / prob.Ts


def lambda_update(residual_sq: float, lambda0: float, lambda_min: float) -> float:
    """``max(lambda0 / ||r||^2, lambda_min)``; a zero residual maps to ``lambda0 * 1e12``."""
    if residual_sq < 0:
        raise ConfigurationError("residual_sq must be non-negative")
    if residual_sq == 0:
        return max(lambda0 * 1e12, lambda_min)
    return max(lambda0 / residual_sq, lambda_min)


def _descend(prob: _Problem, psi, tau_s, reg, cfg: DescentConfig, steps: int):
    """Damped Gauss-Newton-preconditioned descent with Armijo backtracking.

    Returns the new parameters and the surrogate value after every accepted
    step (first entry: starting value).
    """
    psi = np.array(psi, dtype=float)
    tau_s = np.array(tau_s, dtype=float)
    L = len(psi)
    history = []
    if L == 0:
        return psi, tau_s, [0.0]
    for _ in range(steps):
        s, g, H, _ = prob.gradient(psi, tau_s, reg)
        if not history:
            history.append(s)
        if np.max(np.abs(g)) < 1e-10:
            break
        hd = np.diag(H).copy()
        floor = 1e-9 * max(hd.max(), 1e-300)
        Hd = H + np.diag(cfg.damping * hd + floor)
        try:
            d = -np.linalg.solve(Hd, g)
        except np.linalg.LinAlgError:
            d = -g / (hd + floor)
        slope = float(g @ d)
        if not np.isfinite(slope) or slope >= 0:
            d = -g / (hd + floor)
            slope = float(g @ d)
        t = cfg.initial_step
        accepted = False
        for _ls in range(cfg.max_line_search_steps):
            p_new = psi + t * d[:L]
            t_new = tau_s + t * d[L:]
            s_new, _ = prob.surrogate(p_new, t_new, reg)
            if s_new <= s + cfg.armijo * t * slope:
                accepted = True
                break
            t *= cfg.shrink_factor
        if not accepted:
            break
        psi, tau_s = p_new, t_new
        history.append(s_new)
    return psi, tau_s, history


def descend_psi_tau(state: ExtractionState, y, W, ctx: ExtractionContext,
                    config: Optional[DescentConfig] = None, steps: Optional[int] = None):
    """One surrogate-decreasing update of ``(psi, tau)`` at fixed ``D`` and ``lam``.

    Line-search exhaustion leaves the parameters unchanged.
    """
    cfg = config or DescentConfig()
    prob = _problem(y, W, ctx)
    reg = _reg(state.lam, weight_matrix_D(state.beta, state.epsilon))
    psi, tau_s, _ = _descend(prob, state.psi, state.tau / prob.Ts, reg, cfg,
                             cfg.inner_steps if steps is None else steps)
    return psi, tau_s * prob.Ts


def prune_paths(state: ExtractionState, beta_min: float) -> ExtractionState:
    keep = np.abs(state.beta) >= beta_min
    return replace(state, beta=state.beta[keep], psi=state.psi[keep], tau=state.tau[keep])


def _merge_close(beta, psi, tau_s, M: int, distance: float):
    """Fold paths closer than ``distance`` resolution cells into the stronger one."""
    if len(beta) < 2 or distance <= 0:
        return beta, psi, tau_s
    order = np.argsort(-np.abs(beta))
    beta, psi, tau_s = beta[order].copy(), psi[order], tau_s[order]
    alive = np.ones(len(beta), dtype=bool)
    for i in range(len(beta)):
        if not alive[i]:
            continue
        for j in range(i + 1, len(beta)):
            if alive[j] and np.hypot(M * (psi[i] - psi[j]), tau_s[i] - tau_s[j]) < distance:
                beta[i] += beta[j]
                alive[j] = False
    return beta[alive], psi[alive], tau_s[alive]


def _best_refined_peak(prob: _Problem, psi, tau_s, r, score, psi_grid, tau_grid, cfg: ExtractionConfig):
    """Best of the top grid peaks after off-grid refinement against ``r``.

    Grid straddle loss and leakage from imperfectly fitted paths can rank a
    sidelobe of two nearby paths above the true peak.  Several separated
    peaks are therefore refined as single atoms and judged by the joint
    least-squares residual together with the atoms already selected.
    """
    M = prob.M
    k = min(64 * cfg.init_candidates, score.size)
    flat = np.argpartition(score, -k, axis=None)[-k:]
    flat = flat[np.argsort(score.flat[flat])[::-1]]
    picks = []
    for idx in flat:
        g, t = np.unravel_index(idx, score.shape)
        if all(np.hypot(M * (psi_grid[g] - p), tau_grid[t] - q) >= 1.0 for p, q in picks):
            picks.append((psi_grid[g], tau_grid[t]))
            if len(picks) == cfg.init_candidates:
                break
    if len(picks) == 1:
        return picks[0]
    sub = copy.copy(prob)
    sub.y = r
    sub._cache_key = sub._cache = None
    A0 = prob.atoms(psi, tau_s)
    reg = np.full(len(psi) + 1, 1e-9 * prob.N)
    best, best_res = picks[0], np.inf
    for p, q in picks:
        p1, q1, _ = _descend(sub, [p], [q], reg[:1], cfg.descent, steps=cfg.init_refine_steps)
        A = np.concatenate([A0, sub.atoms(p1, q1)], axis=1)
        res = prob.y - A @ prob.solve(A, reg)[0]
        val = np.real(np.vdot(res, res))
        if val < best_res:
            best, best_res = (p1[0], q1[0]), val
    return best


def _initial_paths(prob: _Problem, cfg: ExtractionConfig, lam0: float):
    """Greedy selection of up to ``max_paths`` atoms from an oversampled (psi, tau) grid.

    Each new atom is refined off-grid together with the earlier ones before
    the residual is recomputed, so grid-mismatch leftovers do not masquerade
    as extra paths.  Selection stops early once the best correlation is well
    below the level at which the reweighted gain update has a non-zero fixed
    point (``|z|^2 >= 4 n ||r||^2 / lam0`` for an atom of energy ``n``); such
    atoms would only be pruned again.
    """
    ctx = prob.ctx
    M = prob.M
    lim = ctx.array.d_over_lambda
    n_psi = max(cfg.grid_oversampling * M * int(np.ceil(2 * lim)), 2)
    psi_grid = -lim + (np.arange(n_psi) + 0.5) * (2 * lim / n_psi)
    tau_box = min(cfg.tau_max_s, 1.0 / ctx.ofdm.subcarrier_spacing_hz) / prob.Ts
    n_tau = max(int(np.ceil(cfg.grid_oversampling * tau_box)), 1)
    tau_grid = np.arange(n_tau) * (tau_box / n_tau)

    # angle atoms in measurement space, shape (G, P, K); delay enters per pilot
    scale = 1.0 + prob.f / prob.fc if prob.squint else np.ones_like(prob.f)
    m = np.arange(M)
    E = np.exp(-2j * np.pi * m[None, None, :] * (psi_grid[:, None, None] * scale[None, :, None]))
    V = np.einsum("pkm,gpm->gpk", prob.WcT, E)
    norm2 = np.sum(np.abs(V) ** 2, axis=(1, 2))
    Tph = np.exp(2j * np.pi * (prob.f * prob.Ts)[:, None] * tau_grid[None, :])

    reg_init = np.full(0, 1e-9)
    psi = np.zeros(0)
    tau_s = np.zeros(0)
    r = prob.y.copy()
    ynorm = np.real(np.vdot(prob.y, prob.y))
    for _ in range(cfg.max_paths):
        Q = np.einsum("gpk,pk->gp", V.conj(), r.reshape(prob.P, prob.K))
        score = np.abs(Q @ Tph) ** 2 / norm2[:, None]
        g, t = np.unravel_index(np.argmax(score), score.shape)
        if len(psi) and score[g, t] < 2.0 * np.real(np.vdot(r, r)) / lam0:
            break
        p_new, t_new = _best_refined_peak(prob, psi, tau_s, r, score, psi_grid, tau_grid, cfg)
        psi = np.append(psi, p_new)
        tau_s = np.append(tau_s, t_new)
        reg_init = np.full(len(psi), 1e-9 * prob.N)
        psi, tau_s, _ = _descend(prob, psi, tau_s, reg_init, cfg.descent, steps=cfg.init_refine_steps)
        A = prob.atoms(psi, tau_s)
        beta, _ = prob.solve(A, reg_init)
        r = prob.y - A @ beta
        if np.real(np.vdot(r, r)) <= 1e-24 * ynorm:
            break
    return psi, tau_s


def extract(y, W, ctx: ExtractionContext, config: Optional[ExtractionConfig] = None,
            initial: Optional[tuple] = None) -> ExtractionResult:
    """Iterative parameter extraction for one user's uplink pilots.

    ``initial`` may supply starting ``(psi, tau_s)`` arrays; otherwise a
    greedy oversampled-grid search seeds the iteration.  The returned trace
    holds one record per iteration with the fields of ``TRACE_FIELDS``.
    """
    cfg = config or ExtractionConfig()
    prob = _problem(y, W, ctx)
    ynorm2 = float(np.real(np.vdot(prob.y, prob.y)))
    empty = np.zeros(0)
    if ynorm2 == 0.0:
        return ExtractionResult(empty, empty, np.zeros(0, dtype=complex), [], 0, True, False)

    # unit mean power per measurement keeps eps / beta_min / gamma_T scale-free
    s = np.sqrt(ynorm2 / prob.N)
    prob.y = prob.y / s
    lam0 = cfg.lambda0_for(prob.N)

    if initial is None:
        psi, tau_s = _initial_paths(prob, cfg, lam0)
    else:
        psi = np.asarray(initial[0], dtype=float).copy()
        tau_s = np.asarray(initial[1], dtype=float) / prob.Ts
    eps = cfg.epsilon_init
    lam = lambda_update(float(prob.N), lam0, cfg.lambda_min)
    _, beta = prob.surrogate(psi, tau_s, np.full(len(psi), 1.0 / (eps * lam)))
    r = prob.y - prob.atoms(psi, tau_s) @ beta if len(psi) else prob.y
    lam = lambda_update(float(np.real(np.vdot(r, r))), lam0, cfg.lambda_min)

    trace = []
    converged = False
    n = 0
    for n in range(1, cfg.max_iters + 1):
        reg = (1.0 / (np.abs(beta) ** 2 + eps)) / lam
        psi, tau_s, hist = _descend(prob, psi, tau_s, reg, cfg.descent, cfg.descent.inner_steps)
        s1, beta_new = prob.surrogate(psi, tau_s, reg)
        A = prob.atoms(psi, tau_s)
        r = prob.y - A @ beta_new
        lam = lambda_update(float(np.real(np.vdot(r, r))), lam0, cfg.lambda_min)
        gamma = float(np.linalg.norm(beta_new - beta))
        if gamma < np.sqrt(eps):
            eps = max(eps / 10.0, cfg.epsilon_min)
        keep = np.abs(beta_new) >= cfg.beta_min
        beta, psi, tau_s = beta_new[keep], psi[keep], tau_s[keep]
        beta, psi, tau_s = _merge_close(beta, psi, tau_s, prob.M, cfg.merge_distance)
        trace.append({"iter": n, "s1": s1, "lam": lam, "eps": eps, "L": len(beta), "gamma": gamma,
                      "stage": hist})
        if len(beta) == 0:
            converged = True
            break
        if gamma < cfg.gamma_T and eps <= cfg.epsilon_min:
            converged = True
            break

    truncated = not converged
    if truncated:
        log.debug("extraction stopped at max_iters=%d", cfg.max_iters)
    period = 1.0 / (ctx.ofdm.subcarrier_spacing_hz * prob.Ts)
    tau_s = np.mod(tau_s, period)
    return ExtractionResult(psi.copy(), tau_s * prob.Ts, beta * s, trace, n, converged, truncated)


def write_trace_csv(trace: Sequence[dict], path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_FIELDS)
            for rec in trace:
                w.writerow([rec[k] for k in TRACE_FIELDS])
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc}") from exc
