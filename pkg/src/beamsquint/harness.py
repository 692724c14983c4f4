"""Seeded Monte Carlo experiments over extraction, uplink and downlink estimation.

A scenario is described by a flat ``section.key = value`` text file (values
are JSON literals).  Every trial draws its randomness from a stream keyed by
``(seed, trial)`` only, so all sweep points see the same users, gains and
noise shapes (common random numbers) and results are bit-reproducible.

SNR convention: ``SNR = E{||h||^2 / (M P)} / sigma2`` at the antenna ports,
with the expectation taken over the user population (LoS power 1 plus the
mean number of NLoS paths at their relative power).  The downlink uses the
same ``sigma2``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .channel import (ArrayConfig, ConfigurationError, GainStats, OfdmConfig, UserChannel, full_band_basis,
                      propagation_delay, squint_span_samples)
from .downlink import (DownlinkConfig, build_A_orth, build_precoders, conventional_precoders,
                       group_users_downlink, ls_gains_downlink, mmse_gains_downlink, simulate_downlink_reception,
                       user_downlink)
from .extraction import ExtractionConfig, ExtractionContext, ExtractionResult, extract
from .frontend import HybridDims, NoiseModel, complex_normal, noise_covariance_C, random_analog_combiner, \
    simulate_uplink_reception, stack_combiners
from .uplink import (MetricScales, _effective, angle_sq_errors, associate, delay_sq_errors, group_users_uplink,
                     mmse_gains_uplink, reconstruct_full_band, simulate_group_reception)

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("sweep_var", "sweep_value", "estimator", "metric", "mean", "stderr", "trials", "seed")
SWEEP_VARS = ("snr_db", "M", "W", "N_RF", "squint_level")
EXPERIMENTS = ("extraction", "uplink", "downlink")
ESTIMATORS = {
    "extraction": ("proposed", "conventional"),
    "uplink": ("LS", "MMSE-true", "MMSE-recon", "conventional"),
    "downlink": ("LS", "MMSE-true", "MMSE-recon", "conventional", "conventional-LS"),
}


def squint_level_to_bandwidth(level: float, M: int, array: ArrayConfig) -> float:
    """Bandwidth whose maximum aperture delay ``(M - 1) d / c`` spans ``level`` samples."""
    if not level > 0:
        raise ConfigurationError("squint level must be positive")
    return level * array.carrier_hz / ((M - 1) * array.d_over_lambda)


def bandwidth_to_squint_level(bandwidth_hz: float, M: int, array: ArrayConfig) -> float:
    return bandwidth_hz * (M - 1) * array.d_over_lambda / array.carrier_hz


# -- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class SystemSection:
    num_antennas: int = 64
    d_over_lambda: float = 0.5
    carrier_hz: float = 26e9
    carrier_dl_hz: float = 28e9
    num_subcarriers: int = 256
    bandwidth_hz: float = 600e6
    num_rf: int = 4
    blocks_up: int = 12
    num_pilots: int = 12
    num_rf_dl: int = 4


@dataclass(frozen=True)
class PopulationSection:
    num_users: int = 1
    aoa_deg: tuple = (-60.0, 60.0)
    nlos: tuple = (0, 5)
    delay_s: tuple = (0.0, 300e-9)
    gain_model: str = "rayleigh"  # or "fixed": deterministic magnitude, uniform phase
    nlos_power_db: float = -5.0
    min_separation: float = 0.0  # within-user, in angle-delay resolution cells


@dataclass(frozen=True)
class SweepSection:
    var: str = "snr_db"
    values: tuple = (0.0, 10.0, 20.0)


@dataclass(frozen=True)
class UplinkSection:
    guard: float = 5.0
    kappa: float = 1
    power_source: str = "estimated"  # or "true"


@dataclass(frozen=True)
class DownlinkSection:
    guard: float = 0.4
    kappa: float = 10


@dataclass(frozen=True)
class ExtractionSection:
    max_paths: int = 8
    max_iters: int = 200
    lambda0: Optional[float] = None


@dataclass(frozen=True)
class ScenarioConfig:
    experiment: str = "uplink"
    snr_db: float = 20.0
    trials: int = 200
    seed: int = 0
    estimators: tuple = ()  # empty: every estimator of the experiment
    system: SystemSection = field(default_factory=SystemSection)
    population: PopulationSection = field(default_factory=PopulationSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    uplink: UplinkSection = field(default_factory=UplinkSection)
    downlink: DownlinkSection = field(default_factory=DownlinkSection)
    extraction: ExtractionSection = field(default_factory=ExtractionSection)

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators) or ESTIMATORS.get(self.experiment, ()))
        object.__setattr__(self, "sweep", replace(self.sweep, values=tuple(self.sweep.values)))
        self.validate()

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if int(self.trials) != self.trials or self.trials < 1:
            raise ConfigurationError("trials must be a positive integer")
        if self.sweep.var not in SWEEP_VARS:
            raise ConfigurationError(f"sweep.var must be one of {SWEEP_VARS}, got {self.sweep.var!r}")
        if not self.sweep.values:
            raise ConfigurationError("sweep.values must not be empty")
        allowed = ESTIMATORS[self.experiment]
        if not self.estimators or any(e not in allowed for e in self.estimators):
            raise ConfigurationError(f"estimators for {self.experiment!r} must be drawn from {allowed}")
        pop = self.population
        if pop.gain_model not in ("rayleigh", "fixed"):
            raise ConfigurationError("population.gain_model must be 'rayleigh' or 'fixed'")
        if pop.num_users < 1 or pop.nlos[0] < 0 or pop.nlos[1] < pop.nlos[0]:
            raise ConfigurationError("invalid population size or NLoS range")
        if not -90 <= pop.aoa_deg[0] < pop.aoa_deg[1] <= 90:
            raise ConfigurationError("population.aoa_deg must be an increasing pair inside [-90, 90]")
        if not 0 <= pop.delay_s[0] <= pop.delay_s[1]:
            raise ConfigurationError("population.delay_s must be a non-negative increasing pair")
        if self.uplink.power_source not in ("estimated", "true"):
            raise ConfigurationError("uplink.power_source must be 'estimated' or 'true'")
        if self.system.num_pilots * 1 > self.system.num_subcarriers:
            raise ConfigurationError("more pilots than subcarriers")

    def at(self, value) -> "ScenarioConfig":
        """Copy with the sweep variable set to ``value``."""
        var = self.sweep.var
        s = self.system
        if var == "snr_db":
            return replace(self, snr_db=float(value))
        if var == "M":
            return replace(self, system=replace(s, num_antennas=int(value)))
        if var == "W":
            return replace(self, system=replace(s, bandwidth_hz=float(value)))
        if var == "N_RF":
            return replace(self, system=replace(s, num_rf=int(value)))
        if var == "squint_level":
            W = squint_level_to_bandwidth(float(value), s.num_antennas, self.array)
            return replace(self, system=replace(s, bandwidth_hz=W))
        raise ConfigurationError(f"unknown sweep variable {var!r}")

    @property
    def array(self) -> ArrayConfig:
        s = self.system
        return ArrayConfig(s.num_antennas, s.d_over_lambda, s.carrier_hz)

    @property
    def array_dl(self) -> ArrayConfig:
        return self.array.at_carrier(self.system.carrier_dl_hz)

    @property
    def ofdm(self) -> OfdmConfig:
        return OfdmConfig(self.system.num_subcarriers, self.system.bandwidth_hz)

    @property
    def dims(self) -> HybridDims:
        s = self.system
        return HybridDims(s.num_rf, s.blocks_up, s.num_pilots)

    @property
    def reference_power(self) -> float:
        """Population-average per-element channel power ``E ||h||^2 / (M P)``."""
        lo, hi = self.population.nlos
        return 1.0 + 0.5 * (lo + hi) * 10 ** (self.population.nlos_power_db / 10)

    @property
    def sigma2(self) -> float:
        return self.reference_power / 10 ** (self.snr_db / 10)


def _section_classes():
    return {"system": SystemSection, "population": PopulationSection, "sweep": SweepSection,
            "uplink": UplinkSection, "downlink": DownlinkSection, "extraction": ExtractionSection}


def _coerce(cls, name, value):
    for f in fields(cls):
        if f.name == name:
            if isinstance(value, list):
                return tuple(value)
            return value
    raise ConfigurationError(f"unknown key {name!r} for {cls.__name__}")


def parse_config_text(text: str) -> ScenarioConfig:
    """Parse ``key = value`` lines (``#`` comments; dotted keys address sections)."""
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {k: {} for k in _section_classes()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            value = json.loads(val)
        except json.JSONDecodeError:
            raise ConfigurationError(f"line {lineno}: value {val!r} is not a JSON literal") from None
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in sections:
                raise ConfigurationError(f"line {lineno}: unknown section {sec!r}")
            sections[sec][name] = _coerce(_section_classes()[sec], name, value)
        else:
            if key not in {f.name for f in fields(ScenarioConfig)} or key in sections:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
            top[key] = tuple(value) if isinstance(value, list) else value
    built = {k: _section_classes()[k](**v) for k, v in sections.items()}
    try:
        return ScenarioConfig(**top, **built)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def dump_config(cfg: ScenarioConfig) -> str:
    """Inverse of :func:`parse_config_text`."""
    lines = []
    for f in fields(ScenarioConfig):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            for g in fields(v):
                lines.append(f"{f.name}.{g.name} = {json.dumps(_jsonable(getattr(v, g.name)))}")
        else:
            lines.append(f"{f.name} = {json.dumps(_jsonable(v))}")
    return "\n".join(lines) + "\n"


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


# -- results ----------------------------------------------------------------

@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    def add(self, sweep_var, sweep_value, estimator, metric, mean, stderr, trials, seed):
        self.rows.append({"sweep_var": sweep_var, "sweep_value": float(sweep_value), "estimator": estimator,
                          "metric": metric, "mean": float(mean), "stderr": float(stderr),
                          "trials": int(trials), "seed": int(seed)})

    def sorted(self) -> "ResultTable":
        return ResultTable(sorted(self.rows, key=lambda r: (r["sweep_value"], r["estimator"], r["metric"])))

    def select(self, estimator: Optional[str] = None, metric: Optional[str] = None) -> list:
        return [r for r in self.rows if (estimator is None or r["estimator"] == estimator)
                and (metric is None or r["metric"] == metric)]

    def series(self, estimator: str, metric: str) -> tuple[np.ndarray, np.ndarray]:
        rows = sorted(self.select(estimator, metric), key=lambda r: r["sweep_value"])
        return np.array([r["sweep_value"] for r in rows]), np.array([r["mean"] for r in rows])

    def __eq__(self, other):
        return isinstance(other, ResultTable) and self.rows == other.rows


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def emit_csv(table: ResultTable, path) -> None:
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in table.rows:
        w.writerow([_fmt(r[c]) for c in RESULT_COLUMNS])
    try:
        path.write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc


def emit_json(table: ResultTable, path) -> None:
    path = Path(path)
    try:
        path.write_text(json.dumps({"columns": list(RESULT_COLUMNS), "rows": table.rows}, indent=1) + "\n",
                        encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc


def read_csv(path) -> ResultTable:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append({"sweep_var": r["sweep_var"], "sweep_value": float(r["sweep_value"]),
                         "estimator": r["estimator"], "metric": r["metric"], "mean": float(r["mean"]),
                         "stderr": float(r["stderr"]), "trials": int(r["trials"]), "seed": int(r["seed"])})
    return ResultTable(rows)


def read_json(path) -> ResultTable:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return ResultTable(list(data["rows"]))


# -- population -------------------------------------------------------------

def _trial_streams(seed: int, trial: int, n: int = 6) -> list[np.random.Generator]:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(trial),))
    return [np.random.default_rng(s) for s in ss.spawn(n)]


def path_powers(num_nlos: int, nlos_power_db: float) -> np.ndarray:
    return np.concatenate([[1.0], np.full(num_nlos, 10 ** (nlos_power_db / 10))])


def draw_gains(rng: np.random.Generator, powers: np.ndarray, model: str) -> np.ndarray:
    if model == "fixed":
        return np.sqrt(powers) * np.exp(2j * np.pi * rng.uniform(size=len(powers)))
    return complex_normal(rng, len(powers), 1.0) * np.sqrt(powers)


def draw_user(rng: np.random.Generator, cfg: ScenarioConfig) -> tuple[UserChannel, GainStats]:
    """One LoS path plus a uniform number of NLoS paths; angles uniform in degrees."""
    pop = cfg.population
    n_nlos = int(rng.integers(pop.nlos[0], pop.nlos[1] + 1))
    L = n_nlos + 1
    dl = cfg.system.d_over_lambda
    M, P = cfg.system.num_antennas, cfg.system.num_pilots
    eta = cfg.ofdm.subcarrier_spacing_hz
    psi = np.zeros(L)
    tau = np.zeros(L)
    for l in range(L):
        for _attempt in range(1000):
            p = dl * np.sin(np.deg2rad(rng.uniform(*pop.aoa_deg)))
            t = rng.uniform(*pop.delay_s)
            if all(np.hypot(M * (p - psi[j]), P * eta * (t - tau[j])) >= pop.min_separation for j in range(l)):
                break
        else:
            raise ConfigurationError("cannot place paths with the requested minimum separation")
        psi[l], tau[l] = p, t
    powers = path_powers(n_nlos, pop.nlos_power_db)
    alpha = draw_gains(rng, powers, pop.gain_model)
    return UserChannel.from_arrays(psi, tau, alpha), GainStats(powers)


def pilot_pool(rng: np.random.Generator, num_subcarriers: int, P: int) -> list[tuple[int, ...]]:
    """Disjoint pilot sets spread over the band: a random permutation cut into chunks of ``P``.

    A set whose index differences share a common factor g leaves delays
    ambiguous modulo 1/(g*eta) (e.g. all-even pilots); such pools are redrawn.
    """
    n = num_subcarriers // P
    for _ in range(100):
        perm = rng.permutation(np.arange(1, num_subcarriers + 1))
        sets = [tuple(sorted(int(q) for q in perm[i * P:(i + 1) * P])) for i in range(n)]
        if P < 2 or all(math.gcd(*np.diff(s).tolist()) == 1 for s in sets):
            return sets
    raise ConfigurationError("could not draw delay-unambiguous pilot sets")


# -- one trial ----------------------------------------------------------------

def _extraction_config(cfg: ScenarioConfig) -> ExtractionConfig:
    e = cfg.extraction
    return ExtractionConfig(max_paths=e.max_paths, max_iters=e.max_iters, lambda0=e.lambda0,
                            tau_max_s=max(1.5 * cfg.population.delay_s[1], 1e-12))


def _as_user(res: ExtractionResult) -> UserChannel:
    return UserChannel.from_arrays(res.psi, res.tau, res.alpha)


def _stats_from(res_user: UserChannel) -> GainStats:
    return GainStats(np.abs(res_user.alpha) ** 2)


class _Accumulator:
    """Per-trial numerators/denominators so that the reported mean is a ratio of sums."""

    def __init__(self):
        self.num: dict[tuple[str, str], float] = {}
        self.den: dict[tuple[str, str], float] = {}

    def add(self, est: str, metric: str, num: float, den: float):
        key = (est, metric)
        self.num[key] = self.num.get(key, 0.0) + float(num)
        self.den[key] = self.den.get(key, 0.0) + float(den)


def _trial_extraction(cfg: ScenarioConfig, trial: int, acc: _Accumulator):
    r_pop, r_pil, r_comb, r_noise, _, _ = _trial_streams(cfg.seed, trial)
    array, ofdm = cfg.array, cfg.ofdm
    user, _ = draw_user(r_pop, cfg)
    pilots = pilot_pool(r_pil, ofdm.num_subcarriers, cfg.system.num_pilots)[0]
    combiner = random_analog_combiner(cfg.dims, array.num_antennas, int(r_comb.integers(2 ** 31)))
    stacked = stack_combiners(combiner, pilots)
    y = simulate_uplink_reception(user, stacked, NoiseModel(cfg.sigma2), array, ofdm, rng=r_noise)
    scales = MetricScales.for_system(array, ofdm, len(pilots), guard=cfg.uplink.guard)
    ecfg = _extraction_config(cfg)
    for est in cfg.estimators:
        ctx = ExtractionContext(array, ofdm, pilots, squint=(est == "proposed"))
        estimate = _as_user(extract(y, stacked, ctx, ecfg))
        a_err = angle_sq_errors(estimate, user, scales)
        d_err = delay_sq_errors(estimate, user, scales)
        acc.add(est, "amse_angle", a_err.sum(), len(a_err))
        acc.add(est, "amse_delay", d_err.sum(), len(d_err))
        assoc = associate(estimate, user, scales)
        g_err = np.abs(user.alpha) ** 2
        for i, j in assoc.pairs:
            g_err[i] = abs(estimate.alpha[j] - user.alpha[i]) ** 2
        acc.add(est, "nmse_gain", g_err.sum(), float(np.sum(np.abs(user.alpha) ** 2)))


def _phase_one(cfg, users, pool, combiner, r_noise, need_conv: bool):
    """Individual (orthogonal-pilot) extraction for every user."""
    array, ofdm = cfg.array, cfg.ofdm
    ecfg = _extraction_config(cfg)
    est_prop, est_conv = [], []
    for k, user in enumerate(users):
        pilots = pool[k % len(pool)]
        stacked = stack_combiners(combiner, pilots)
        y = simulate_uplink_reception(user, stacked, NoiseModel(cfg.sigma2), array, ofdm, rng=r_noise)
        est_prop.append(_as_user(extract(y, stacked, ExtractionContext(array, ofdm, pilots), ecfg)))
        if need_conv:
            ctx = ExtractionContext(array, ofdm, pilots, squint=False)
            est_conv.append(_as_user(extract(y, stacked, ctx, ecfg)))
    return est_prop, est_conv


def _fresh(users: Sequence[UserChannel], stats: Sequence[GainStats], rng, model: str) -> list[UserChannel]:
    return [u.with_gains(draw_gains(rng, s.diag, model)) for u, s in zip(users, stats)]


def _trial_uplink(cfg: ScenarioConfig, trial: int, acc: _Accumulator):
    r_pop, r_pil, r_comb, r_noise, r_gain, r_noise2 = _trial_streams(cfg.seed, trial)
    array, ofdm = cfg.array, cfg.ofdm
    drawn = [draw_user(r_pop, cfg) for _ in range(cfg.population.num_users)]
    users = [u for u, _ in drawn]
    stats = [s for _, s in drawn]
    pool = pilot_pool(r_pil, ofdm.num_subcarriers, cfg.system.num_pilots)
    combiner = random_analog_combiner(cfg.dims, array.num_antennas, int(r_comb.integers(2 ** 31)))
    need_conv = "conventional" in cfg.estimators
    est_prop, est_conv = _phase_one(cfg, users, pool, combiner, r_noise, need_conv)
    live = _fresh(users, stats, r_gain, cfg.population.gain_model)

    # grouping on the extracted parameters; users with nothing extracted train alone
    idx = [k for k, e in enumerate(est_prop) if len(e)]
    plan = group_users_uplink([est_prop[k] for k in idx], cfg.uplink.guard, cfg.uplink.kappa, pool,
                              array.num_antennas, ofdm.subcarrier_spacing_hz) if idx else None
    groups = [[idx[i] for i in g] for g in plan.groups] if plan else []
    groups += [[k] for k in range(len(users)) if k not in idx]
    if len(groups) > len(pool):
        raise ConfigurationError(f"{len(groups)} groups exceed the {len(pool)} available pilot sets")

    for g, members in enumerate(groups):
        pilots = pool[g]
        stacked = stack_combiners(combiner, pilots)
        y_g = simulate_group_reception([live[k] for k in members], stacked, NoiseModel(cfg.sigma2),
                                       array, ofdm, rng=r_noise2)
        C_n = noise_covariance_C(stacked)
        ctx = ExtractionContext(array, ofdm, pilots)
        truth_full = [full_band_channel(live[k], array, ofdm) for k in members]
        den = sum(float(np.sum(np.abs(h) ** 2)) for h in truth_full)

        def record(tag, params, alphas, squint=True):
            num = 0.0
            for p, a, h in zip(params, alphas, truth_full):
                h_hat = reconstruct_full_band(p, a, array, ofdm, squint=squint)
                num += float(np.sum(np.abs(h_hat - h) ** 2))
            acc.add(tag, "nmse_ul", num, den)

        if "LS" in cfg.estimators:
            alphas = [_ls_safe(y_g, stacked, est_prop[k], ctx) for k in members]
            record("LS", [est_prop[k] for k in members], alphas)
        if "MMSE-recon" in cfg.estimators:
            if cfg.uplink.power_source == "true":
                lam = [_true_stats_for(est_prop[k], users[k], stats[k], array, ofdm, cfg) for k in members]
            else:
                lam = [_stats_from(est_prop[k]) for k in members]
            alphas = mmse_gains_uplink(y_g, stacked, [est_prop[k] for k in members], lam, cfg.sigma2, C_n, ctx)
            record("MMSE-recon", [est_prop[k] for k in members], alphas)
        if "MMSE-true" in cfg.estimators:
            alphas = mmse_gains_uplink(y_g, stacked, [users[k] for k in members], [stats[k] for k in members],
                                       cfg.sigma2, C_n, ctx)
            record("MMSE-true", [users[k] for k in members], alphas)
        if need_conv:
            ctx_c = ExtractionContext(array, ofdm, pilots, squint=False)
            alphas = mmse_gains_uplink(y_g, stacked, [est_conv[k] for k in members],
                                       [_stats_from(est_conv[k]) for k in members], cfg.sigma2, C_n, ctx_c)
            record("conventional", [est_conv[k] for k in members], alphas, squint=False)


def _true_stats_for(est: UserChannel, user: UserChannel, stats: GainStats, array, ofdm, cfg) -> GainStats:
    """True mean powers carried over to the estimated paths via association (misses dropped)."""
    scales = MetricScales.for_system(array, ofdm, cfg.system.num_pilots, guard=cfg.uplink.guard)
    assoc = associate(est, user, scales)
    lam = np.full(len(est), min(stats.mean_powers) if len(stats) else 1.0)
    for i, j in assoc.pairs:
        lam[j] = stats.mean_powers[i]
    return GainStats(lam)


def _ls_safe(y_g, stacked, params, ctx) -> np.ndarray:
    """Minimum-norm least squares; nearly coincident estimated paths do not abort a sweep."""
    if len(params) == 0:
        return np.zeros(0, dtype=complex)
    A = _effective(stacked, params, ctx)
    sol, *_ = np.linalg.lstsq(A, y_g, rcond=None)
    return sol


def full_band_channel(user: UserChannel, array: ArrayConfig, ofdm: OfdmConfig, squint: bool = True) -> np.ndarray:
    if not len(user):
        return np.zeros(array.num_antennas * ofdm.num_subcarriers, dtype=complex)
    return full_band_basis(user, array, ofdm, squint=squint) @ user.alpha


def _trial_downlink(cfg: ScenarioConfig, trial: int, acc: _Accumulator):
    r_pop, r_pil, r_comb, r_noise, r_gain, r_noise2 = _trial_streams(cfg.seed, trial)
    array, ofdm = cfg.array, cfg.ofdm
    array_dl = cfg.array_dl
    fc, fd = cfg.system.carrier_hz, cfg.system.carrier_dl_hz
    drawn = [draw_user(r_pop, cfg) for _ in range(cfg.population.num_users)]
    users = [u for u, _ in drawn]
    stats = [s for _, s in drawn]
    pool = pilot_pool(r_pil, ofdm.num_subcarriers, cfg.system.num_pilots)
    combiner = random_analog_combiner(cfg.dims, array.num_antennas, int(r_comb.integers(2 ** 31)))
    need_conv = any(e.startswith("conventional") for e in cfg.estimators)
    est_prop, est_conv = _phase_one(cfg, users, pool, combiner, r_noise, need_conv)

    # downlink gains are independent of the uplink ones
    dl_true = [user_downlink(u, fc, fd, draw_gains(r_gain, s.diag, cfg.population.gain_model))
               for u, s in zip(users, stats)]
    dl_prop = [user_downlink(e, fc, fd) for e in est_prop]
    dl_conv = [user_downlink(e, fc, fd) for e in est_conv]
    Mdl = array_dl.num_antennas

    idx = [k for k, e in enumerate(dl_prop) if len(e)]
    groups = [[idx[i] for i in g] for g in group_users_downlink([dl_prop[k] for k in idx], cfg.downlink.guard,
                                                                cfg.downlink.kappa, Mdl)] if idx else []
    missing = [k for k in range(len(users)) if k not in idx]
    if len(groups) > len(pool):
        raise ConfigurationError(f"{len(groups)} downlink groups exceed the {len(pool)} available pilot sets")
    for k in missing:  # nothing known about these users: the estimate is the zero channel
        h = full_band_channel(dl_true[k], array_dl, ofdm)
        e = float(np.sum(np.abs(h) ** 2))
        for tag in cfg.estimators:
            acc.add(tag, "nmse_dl", e, e)

    sigma2 = cfg.sigma2
    num_rf = cfg.system.num_rf_dl
    for g, members in enumerate(groups):
        pilots = pool[g]
        truth_full = [full_band_channel(dl_true[k], array_dl, ofdm) for k in members]
        den = sum(float(np.sum(np.abs(h) ** 2)) for h in truth_full)
        A_orth = build_A_orth([dl_prop[k] for k in members], pilots, Mdl, ofdm, fd)
        prec = build_precoders([dl_prop[k] for k in members], A_orth, pilots, array_dl, ofdm, num_rf)
        Sigma = prec.sigma_matrix()
        T_dl = prec.blocks
        obs = [simulate_downlink_reception(dl_true[k], prec, NoiseModel(sigma2), array_dl, ofdm, rng=r_noise2)
               for k in members]

        def record(tag, params, alphas, squint=True):
            num = 0.0
            for p, a, h in zip(params, alphas, truth_full):
                h_hat = reconstruct_full_band(p, a, array_dl, ofdm, squint=squint)
                num += float(np.sum(np.abs(h_hat - h) ** 2))
            acc.add(tag, "nmse_dl", num, den)

        if "LS" in cfg.estimators:
            record("LS", [dl_prop[k] for k in members],
                   [ls_gains_downlink(y, prec.pilot_code, len(dl_prop[k])) for y, k in zip(obs, members)])
        if "MMSE-recon" in cfg.estimators:
            record("MMSE-recon", [dl_prop[k] for k in members],
                   [mmse_gains_downlink(y, dl_prop[k], _stats_from(est_prop[k]), Sigma, sigma2, T_dl, array_dl,
                                        ofdm, pilots) for y, k in zip(obs, members)])
        if "MMSE-true" in cfg.estimators:
            record("MMSE-true", [dl_true[k] for k in members],
                   [mmse_gains_downlink(y, dl_true[k], stats[k], Sigma, sigma2, T_dl, array_dl, ofdm, pilots)
                    for y, k in zip(obs, members)])
        if need_conv:
            conv_members = [k for k in members if len(dl_conv[k])]
            if len(conv_members) < len(members):
                raise ConfigurationError("conventional extraction returned no paths for a grouped user")
            cprec = conventional_precoders([dl_conv[k] for k in members], pilots, array_dl, ofdm, num_rf)
            cSigma = cprec.sigma_matrix()
            cobs = [simulate_downlink_reception(dl_true[k], cprec, NoiseModel(sigma2), array_dl, ofdm,
                                                rng=r_noise2) for k in members]
            if "conventional-LS" in cfg.estimators:
                record("conventional-LS", [dl_conv[k] for k in members],
                       [ls_gains_downlink(y, cprec.pilot_code, len(dl_conv[k])) for y, k in zip(cobs, members)],
                       squint=False)
            if "conventional" in cfg.estimators:
                record("conventional", [dl_conv[k] for k in members],
                       [mmse_gains_downlink(y, dl_conv[k], _stats_from(est_conv[k]), cSigma, sigma2, cprec.blocks,
                                            array_dl, ofdm, pilots, squint=False)
                        for y, k in zip(cobs, members)], squint=False)


_TRIAL_FUNCS = {"extraction": _trial_extraction, "uplink": _trial_uplink, "downlink": _trial_downlink}


def run_trial(cfg: ScenarioConfig, trial: int) -> _Accumulator:
    acc = _Accumulator()
    _TRIAL_FUNCS[cfg.experiment](cfg, trial, acc)
    return acc


def _run_point(args):
    cfg, trial = args
    return run_trial(cfg, trial)


def run_scenario(config: ScenarioConfig, threads: int = 1) -> ResultTable:
    """Monte Carlo sweep; one row per (sweep value, estimator, metric).

    ``mean`` is the ratio of summed numerators to summed denominators over
    trials (AMSE: errors over path count; NMSE: error energy over channel
    energy); ``stderr`` is the standard error of the per-trial numerators
    scaled by the mean denominator.
    """
    table = ResultTable()
    for value in config.sweep.values:
        cfg = config.at(value)
        jobs = [(cfg, t) for t in range(cfg.trials)]
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                accs = list(pool.map(_run_point, jobs))
        else:
            accs = [_run_point(j) for j in jobs]
        keys = sorted({k for a in accs for k in a.num})
        for est, metric in keys:
            num = np.array([a.num.get((est, metric), 0.0) for a in accs])
            den = np.array([a.den.get((est, metric), 0.0) for a in accs])
            dbar = den.mean()
            if dbar == 0:
                continue
            x = num / dbar
            stderr = x.std(ddof=1) / math.sqrt(len(x)) if len(x) > 1 else 0.0
            table.add(cfg.sweep.var, value, est, metric, x.mean(), stderr, cfg.trials, cfg.seed)
    return table.sorted()


def diagnose(config: ScenarioConfig, trial: int = 0, squint: bool = True) -> ExtractionResult:
    """Extraction of the first user of one trial, for convergence traces."""
    r_pop, r_pil, r_comb, r_noise, _, _ = _trial_streams(config.seed, trial)
    array, ofdm = config.array, config.ofdm
    user, _ = draw_user(r_pop, config)
    pilots = pilot_pool(r_pil, ofdm.num_subcarriers, config.system.num_pilots)[0]
    combiner = random_analog_combiner(config.dims, array.num_antennas, int(r_comb.integers(2 ** 31)))
    stacked = stack_combiners(combiner, pilots)
    y = simulate_uplink_reception(user, stacked, NoiseModel(config.sigma2), array, ofdm, rng=r_noise)
    return extract(y, stacked, ExtractionContext(array, ofdm, pilots, squint=squint), _extraction_config(config))


def squint_summary(M: int, bandwidth_hz: float, carrier_hz: float, d_over_lambda: float = 0.5,
                   num_subcarriers: int = 256, sin_theta: float = 1.0) -> dict:
    array = ArrayConfig(M, d_over_lambda, carrier_hz)
    ofdm = OfdmConfig(num_subcarriers, bandwidth_hz)
    psi = d_over_lambda * sin_theta
    return {
        "squint_span_bins": squint_span_samples(psi, array, ofdm),
        "propagation_delay_samples": propagation_delay(psi, array) / ofdm.sample_period_s,
        "squint_level": bandwidth_to_squint_level(bandwidth_hz, M, array),
        "bandwidth_for_level_0.8_hz": squint_level_to_bandwidth(0.8, M, array),
    }
