"""Monte Carlo engine for comparing the estimators on calibrated designs.

A :class:`DgpSpec` describes the joint law of ``(sigma, mu, X, Y)``:

* ``sigma`` is drawn from an empirical sample (with replacement) or a log-normal law;
* ``mu | sigma ~ N(m(sigma), s2(sigma))`` with piecewise-linear ``m`` and ``s2``;
* ``X | mu, sigma ~ N(mu, sigma^2)``;
* linear mode: ``Y = beta_mu * mu + beta_sigma * log10(sigma) + u``;
* nonlinear mode: ``mu ~ G = N(m_bar, s2_bar)`` independently of sigma and
  ``Y = tau * 1(mu > mu0) + u`` with ``mu0`` a quantile of ``G``.

In the linear mode the estimand is the population projection slope::

    beta0 = beta_mu + cov(mu, log10 sigma) / var(mu) * beta_sigma

computed from the spec itself (exact sums over an empirical sigma sample,
adaptive quadrature for the log-normal), never from a simulated sample.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import integrate, stats

from .data import LatentTruth, ObservationSet
from .errors import DegenerateEstimateError, InputError, LatentRegError, SpecError
from .linear import GaussianPrior, classical_eiv, shrinkage_estimator
from .moments import sample_moments
from .nonlinear import npeb_tau, oracle_tau, plugin_tau
from .priors import NpmleConfig, Transform
from .rng import check_seed, stream

__all__ = [
    "PiecewiseLinear",
    "EmpiricalSigma",
    "LogNormalSigma",
    "LinearMode",
    "NonlinearMode",
    "DgpSpec",
    "Draw",
    "McSummary",
    "local_linear_fit",
    "rule_of_thumb_bandwidth",
    "calibrate_dgp",
    "population_moments",
    "true_beta0",
    "scaled_linear_mode",
    "simulate_linear",
    "simulate_nonlinear",
    "run_monte_carlo",
    "default_linear_grid",
    "synthetic_calibration_data",
    "default_spec",
    "LINEAR_MC_ESTIMATORS",
    "NONLINEAR_MC_ESTIMATORS",
]

DEFAULT_N = 10058
GRID_POINTS = 101


# ---------------------------------------------------------------------------
# Piecewise-linear functions and local linear regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PiecewiseLinear:
    """Linear interpolation through ``(knots, values)``; constant beyond the ends."""

    knots: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        k = np.array(self.knots, dtype=float)
        v = np.array(self.values, dtype=float)
        if k.ndim != 1 or k.shape != v.shape or k.size < 1:
            raise InputError("knots and values must be 1-d arrays of equal length")
        if k.size > 1 and not np.all(np.diff(k) > 0):
            raise InputError("knots must be strictly increasing")
        if not (np.isfinite(k).all() and np.isfinite(v).all()):
            raise InputError("knots and values must be finite")
        k.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "values", v)

    def __call__(self, t):
        return np.interp(t, self.knots, self.values)

    @classmethod
    def constant(cls, c: float, lo: float = 0.0, hi: float = 1.0) -> "PiecewiseLinear":
        return cls([lo, hi], [c, c])

    def to_dict(self) -> dict:
        return {"knots": self.knots.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d) -> "PiecewiseLinear":
        return cls(d["knots"], d["values"])

    def equals(self, other) -> bool:
        return np.array_equal(self.knots, other.knots) and np.array_equal(
            self.values, other.values
        )


def rule_of_thumb_bandwidth(x) -> float:
    """``1.06 * sd(x) * n**(-1/5)``."""
    x = np.asarray(x, dtype=float)
    return 1.06 * float(np.std(x)) * x.size ** (-0.2)


def _local_linear_at(x, y, grid, h):
    d = x[None, :] - grid[:, None]
    u = d / h
    w = np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)
    s0 = w.sum(axis=1)
    s1 = (w * d).sum(axis=1)
    s2 = (w * d * d).sum(axis=1)
    t0 = (w * y).sum(axis=1)
    t1 = (w * d * y).sum(axis=1)
    det = s0 * s2 - s1 * s1
    with np.errstate(invalid="ignore", divide="ignore"):
        est = (s2 * t0 - s1 * t1) / det
    # need two distinct support points inside the window for a line
    ok = (s0 > 0) & (det > 1e-12 * np.maximum(s0 * s2, np.finfo(float).tiny))
    return est, ok


def local_linear_fit(x, y, bandwidth: Union[str, float] = "auto", grid_size: int = GRID_POINTS):
    """Epanechnikov local linear regression of ``y`` on ``x``.

    Evaluated on ``grid_size`` equispaced points over ``[min x, max x]`` and
    returned as a :class:`PiecewiseLinear`. ``bandwidth="auto"`` uses
    :func:`rule_of_thumb_bandwidth`. Where a window holds too few distinct points
    the bandwidth at that grid point is widened by factors of 1.5 until the local
    fit is defined.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("x and y must be 1-d arrays of equal length")
    if x.size < 20:
        raise InputError(f"local linear fit needs at least 20 points, got {x.size}")
    if not np.ptp(x) > 0:
        raise DegenerateEstimateError("local linear fit: x has no dispersion")
    h = rule_of_thumb_bandwidth(x) if bandwidth == "auto" else float(bandwidth)
    if not h > 0:
        raise InputError(f"bandwidth must be positive, got {h!r}")
    grid = np.linspace(x.min(), x.max(), grid_size)
    est = np.empty(grid_size)
    todo = np.arange(grid_size)
    width = h
    while todo.size:
        val, ok = _local_linear_at(x, y, grid[todo], width)
        est[todo[ok]] = val[ok]
        todo = todo[~ok]
        width *= 1.5
    return PiecewiseLinear(grid, est)


# ---------------------------------------------------------------------------
# Spec types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmpiricalSigma:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2 or not np.isfinite(v).all() or (v <= 0).any():
            raise SpecError("empirical sigma sample must hold >= 2 positive values", "/sigma_source/values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def draw(self, rng, n):
        return self.values[rng.integers(0, self.values.size, n)]

    def expect(self, fn) -> float:
        return math.fsum(np.asarray(fn(self.values), dtype=float)) / self.values.size

    def support(self):
        return float(self.values.min()), float(self.values.max())

    def to_dict(self):
        return {"kind": "empirical", "values": self.values.tolist()}


@dataclass(frozen=True)
class LogNormalSigma:
    """``log10(sigma) ~ N(log10_mean, log10_sd**2)``."""

    log10_mean: float
    log10_sd: float

    def __post_init__(self):
        if not self.log10_sd > 0:
            raise SpecError("log10_sd must be positive", "/sigma_source/log10_sd")

    def draw(self, rng, n):
        return 10.0 ** rng.normal(self.log10_mean, self.log10_sd, n)

    def expect(self, fn, knots=()) -> float:
        def integrand(z):
            return float(fn(10.0 ** (self.log10_mean + self.log10_sd * z))) * stats.norm.pdf(z)

        pts = [
            (np.log10(k) - self.log10_mean) / self.log10_sd for k in knots if k > 0
        ]
        pts = sorted(p for p in pts if -12 < p < 12)
        val, _ = integrate.quad(
            integrand, -12, 12, points=pts or None, limit=500, epsabs=1e-14, epsrel=1e-12
        )
        return val

    def support(self):
        lo = 10.0 ** (self.log10_mean - 6 * self.log10_sd)
        hi = 10.0 ** (self.log10_mean + 6 * self.log10_sd)
        return lo, hi

    def to_dict(self):
        return {"kind": "lognormal", "log10_mean": self.log10_mean, "log10_sd": self.log10_sd}


@dataclass(frozen=True)
class LinearMode:
    beta_mu: Optional[float] = None
    beta_sigma: Optional[float] = None
    noise_sd: float = 1.0

    def to_dict(self):
        return {
            "kind": "linear",
            "beta_mu": self.beta_mu,
            "beta_sigma": self.beta_sigma,
            "noise_sd": self.noise_sd,
        }


@dataclass(frozen=True)
class NonlinearMode:
    """Threshold design: ``effect = sd(1(mu > mu0)) * tau``."""

    quantile: float = 0.75
    effect: float = 1.0
    noise_sd: float = 1.0
    prior_mean: Optional[float] = None
    prior_var: Optional[float] = None

    @property
    def tau(self) -> float:
        return self.effect / math.sqrt(self.quantile * (1.0 - self.quantile))

    def to_dict(self):
        return {
            "kind": "nonlinear",
            "quantile": self.quantile,
            "effect": self.effect,
            "noise_sd": self.noise_sd,
            "prior_mean": self.prior_mean,
            "prior_var": self.prior_var,
        }


Mode = Union[LinearMode, NonlinearMode]


@dataclass(frozen=True, eq=False)
class DgpSpec:
    sigma_source: Union[EmpiricalSigma, LogNormalSigma]
    cond_mean: PiecewiseLinear
    cond_var: PiecewiseLinear
    mode: Mode = field(default_factory=LinearMode)
    n: int = DEFAULT_N
    seed: int = 0
    calibration: Optional[dict] = None

    def __post_init__(self):
        validate_spec(self)

    # -- derived quantities -------------------------------------------------
    @cached_property
    def _population(self) -> dict:
        # depends only on sigma law, m and s2, which with_mode keeps
        return _population_moments(self)

    def _expect(self, fn) -> float:
        if isinstance(self.sigma_source, LogNormalSigma):
            knots = np.concatenate([self.cond_mean.knots, self.cond_var.knots])
            return self.sigma_source.expect(fn, knots)
        return self.sigma_source.expect(fn)

    def unconditional_prior(self) -> GaussianPrior:
        """``N(m_bar, s2_bar)`` with ``m_bar = E m(sigma)`` and
        ``s2_bar = E s2(sigma) + var m(sigma)`` over the sigma law."""
        mode = self.mode
        if isinstance(mode, NonlinearMode) and mode.prior_mean is not None:
            return GaussianPrior(mode.prior_mean, mode.prior_var)
        pm = population_moments(self)
        return GaussianPrior(pm["mean_mu"], pm["var_mu"])

    def threshold(self) -> float:
        if not isinstance(self.mode, NonlinearMode):
            raise InputError("threshold is defined for nonlinear specs only")
        g = self.unconditional_prior()
        return float(stats.norm.ppf(self.mode.quantile, g.mu, math.sqrt(g.sigma_mu2)))

    def with_mode(self, mode: Mode) -> "DgpSpec":
        return replace(self, mode=mode)

    def to_dict(self) -> dict:
        out = {
            "schema_version": 1,
            "sigma_source": self.sigma_source.to_dict(),
            "cond_mean": self.cond_mean.to_dict(),
            "cond_var": self.cond_var.to_dict(),
            "mode": self.mode.to_dict(),
            "n": self.n,
            "seed": self.seed,
        }
        if self.calibration is not None:
            out["calibration"] = self.calibration
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    @classmethod
    def from_dict(cls, d) -> "DgpSpec":
        from .schemas import validate_dgp

        validate_dgp(d)
        src = d["sigma_source"]
        if src["kind"] == "empirical":
            sigma_source = EmpiricalSigma(src["values"])
        else:
            sigma_source = LogNormalSigma(float(src["log10_mean"]), float(src["log10_sd"]))
        m = d.get("mode", {"kind": "linear"})
        if m["kind"] == "linear":
            mode = LinearMode(m.get("beta_mu"), m.get("beta_sigma"), float(m.get("noise_sd", 1.0)))
        else:
            q = float(m.get("quantile", 0.75))
            effect = m["tau"] * math.sqrt(q * (1.0 - q)) if "tau" in m else m.get("effect", 1.0)
            mode = NonlinearMode(
                q,
                float(effect),
                float(m.get("noise_sd", 1.0)),
                m.get("prior_mean"),
                m.get("prior_var"),
            )
        return cls(
            sigma_source,
            _pl_from(d["cond_mean"], "/cond_mean"),
            _pl_from(d["cond_var"], "/cond_var"),
            mode,
            int(d.get("n", DEFAULT_N)),
            int(d.get("seed", 0)),
            d.get("calibration"),
        )

    @classmethod
    def from_json(cls, path) -> "DgpSpec":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"spec file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise SpecError(f"invalid JSON: {e}", "/") from None
        return cls.from_dict(d)


def _pl_from(d, pointer):
    try:
        return PiecewiseLinear.from_dict(d)
    except InputError as e:
        raise SpecError(e.message, pointer) from None


def validate_spec(spec: DgpSpec) -> None:
    if len(spec.cond_var.values) and spec.cond_var.values.min() < 0:
        k = int(np.argmin(spec.cond_var.values))
        raise SpecError("conditional variance must be >= 0", f"/cond_var/values/{k}")
    if not isinstance(spec.n, (int, np.integer)) or spec.n < 3:
        raise SpecError("n must be an integer >= 3", "/n")
    try:
        check_seed(spec.seed)
    except ValueError as e:
        raise SpecError(str(e), "/seed") from None
    mode = spec.mode
    if not mode.noise_sd > 0:
        raise SpecError("noise sd must be positive", "/mode/noise_sd")
    if isinstance(mode, NonlinearMode):
        if not 0 < mode.quantile < 1:
            raise SpecError("quantile must lie in (0, 1)", "/mode/quantile")
        if (mode.prior_mean is None) != (mode.prior_var is None):
            raise SpecError("prior_mean and prior_var must be given together", "/mode")
        if mode.prior_var is not None and not mode.prior_var > 0:
            raise SpecError("prior_var must be positive", "/mode/prior_var")
        if not np.isfinite(mode.effect):
            raise SpecError("effect must be finite", "/mode/effect")


# ---------------------------------------------------------------------------
# Population quantities
# ---------------------------------------------------------------------------


def population_moments(spec: DgpSpec) -> dict:
    """Moments of ``(mu, log10 sigma)`` implied by the spec's linear-mode law."""
    return dict(spec._population)


def _population_moments(spec: DgpSpec) -> dict:
    m, s2 = spec.cond_mean, spec.cond_var
    e = spec._expect
    mean_m = e(m)
    mean_l = e(np.log10)
    var_m = e(lambda t: (m(t) - mean_m) ** 2)
    mean_s2 = e(s2)
    cov_ml = e(lambda t: (m(t) - mean_m) * (np.log10(t) - mean_l))
    var_l = e(lambda t: (np.log10(t) - mean_l) ** 2)
    return {
        "mean_mu": mean_m,
        "var_mu": mean_s2 + var_m,
        "mean_s2": mean_s2,
        "var_m": var_m,
        "mean_log10_sigma": mean_l,
        "var_log10_sigma": var_l,
        "cov_mu_log10_sigma": cov_ml,
    }


def true_beta0(spec: DgpSpec) -> float:
    mode = spec.mode
    if not isinstance(mode, LinearMode) or mode.beta_mu is None or mode.beta_sigma is None:
        raise InputError("true beta0 needs a linear spec with both coefficients set")
    pm = population_moments(spec)
    if not pm["var_mu"] > 0:
        raise SpecError("spec implies var(mu) = 0", "/cond_var")
    return mode.beta_mu + pm["cov_mu_log10_sigma"] / pm["var_mu"] * mode.beta_sigma


def scaled_linear_mode(spec: DgpSpec, scaled_beta_mu: float, scaled_beta_sigma: float, noise_sd=1.0):
    """Coefficients from the scaled grid: ``sd(mu) * beta_mu`` and
    ``sd(log10 sigma) * beta_sigma``."""
    pm = population_moments(spec)
    return LinearMode(
        scaled_beta_mu / math.sqrt(pm["var_mu"]),
        scaled_beta_sigma / math.sqrt(pm["var_log10_sigma"]),
        noise_sd,
    )


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


def calibrate_dgp(
    data: ObservationSet, bandwidth: Union[str, float] = "auto", n: Optional[int] = None, seed: int = 0
) -> DgpSpec:
    """Fit ``m(sigma) = E[X | sigma]`` and ``s2(sigma) = var(X | sigma) - sigma^2``.

    Both are local linear fits on sigma; negative values of ``s2`` are clamped
    at zero and the clamped fraction of grid points is recorded. The sigma
    sample is stored as the empirical sigma law. Coefficients are left unset.
    """
    sigma, x = data.sigma, data.x
    if not np.ptp(sigma) > 0:
        raise DegenerateEstimateError("calibration needs dispersed sigma")
    m_hat = local_linear_fit(sigma, x, bandwidth)
    resid2 = (x - m_hat(sigma)) ** 2
    v_hat = local_linear_fit(sigma, resid2, bandwidth)
    s2 = v_hat.values - v_hat.knots**2
    clamped = s2 < 0
    frac = float(clamped.mean())
    if frac > 0.5:
        raise DegenerateEstimateError(
            f"calibration infeasible: conditional signal variance negative on "
            f"{frac:.0%} of the sigma grid",
            clamp_fraction=frac,
        )
    s2 = np.where(clamped, 0.0, s2)
    info = {
        "bandwidth": rule_of_thumb_bandwidth(sigma) if bandwidth == "auto" else float(bandwidth),
        "clamp_fraction": frac,
        "source_n": int(data.n),
    }
    return DgpSpec(
        EmpiricalSigma(sigma),
        m_hat,
        PiecewiseLinear(v_hat.knots, s2),
        LinearMode(),
        int(n if n is not None else data.n),
        seed,
        info,
    )


def synthetic_calibration_data(n: int = DEFAULT_N, seed: int = 20240601) -> ObservationSet:
    """A stand-in calibration sample with precision dependence.

    ``log10 sigma = -1.3 + 0.3 * clip(z, -2.5, 2.5)``. Noisier units have a
    higher latent mean (slope 0.2 in ``log10 sigma``) and a latent spread
    proportional to ``sigma``. ``Y`` is left at zero.
    """
    rng = stream(seed, 0)
    ls = -1.3 + 0.3 * np.clip(rng.standard_normal(n), -2.5, 2.5)
    sigma = 10.0**ls
    m = 0.08 + 0.2 * (ls + 1.3)
    sd = np.clip(sigma, 0.005, None)
    mu = m + sd * rng.standard_normal(n)
    x = mu + sigma * rng.standard_normal(n)
    return ObservationSet(np.zeros(n), x, sigma)


def default_spec(mode: str = "linear", quantile: float = 0.75, seed: int = 0) -> DgpSpec:
    """Spec calibrated to :func:`synthetic_calibration_data`."""
    spec = calibrate_dgp(synthetic_calibration_data(), seed=seed)
    if mode == "nonlinear":
        g = spec.unconditional_prior()
        return spec.with_mode(NonlinearMode(quantile, 1.0, 1.0, g.mu, g.sigma_mu2))
    return spec


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Draw:
    """One simulated dataset with everything an estimator may need."""

    data: ObservationSet
    truth: LatentTruth
    target: float
    prior: Optional[GaussianPrior] = None
    transform: Optional[Transform] = None


def _latent(spec, rng, n):
    sigma = spec.sigma_source.draw(rng, n)
    sd = np.sqrt(spec.cond_var(sigma))
    mu = spec.cond_mean(sigma) + sd * rng.standard_normal(n)
    return sigma, mu


def simulate_linear(spec: DgpSpec, n: Optional[int] = None, seed=None, rng=None):
    """Draw ``(ObservationSet, LatentTruth, beta0)`` from a linear spec."""
    mode = spec.mode
    if not isinstance(mode, LinearMode):
        raise InputError("simulate_linear needs a linear-mode spec")
    beta0 = true_beta0(spec)
    n = spec.n if n is None else int(n)
    rng = rng if rng is not None else stream(spec.seed if seed is None else seed, 0, 0)
    sigma, mu = _latent(spec, rng, n)
    x = mu + sigma * rng.standard_normal(n)
    y = mode.beta_mu * mu + mode.beta_sigma * np.log10(sigma) + mode.noise_sd * rng.standard_normal(n)
    return ObservationSet(y, x, sigma), LatentTruth(mu), beta0


def simulate_nonlinear(spec: DgpSpec, n: Optional[int] = None, seed=None, rng=None):
    """Draw ``(ObservationSet, LatentTruth, tau0, G)`` from a nonlinear spec."""
    mode = spec.mode
    if not isinstance(mode, NonlinearMode):
        raise InputError("simulate_nonlinear needs a nonlinear-mode spec")
    g = spec.unconditional_prior()
    mu0 = spec.threshold()
    n = spec.n if n is None else int(n)
    rng = rng if rng is not None else stream(spec.seed if seed is None else seed, 0, 0)
    sigma = spec.sigma_source.draw(rng, n)
    mu = g.mu + math.sqrt(g.sigma_mu2) * rng.standard_normal(n)
    x = mu + sigma * rng.standard_normal(n)
    tau = mode.tau
    y = tau * (mu > mu0) + mode.noise_sd * rng.standard_normal(n)
    return ObservationSet(y, x, sigma), LatentTruth(mu), tau, g


def simulate(spec: DgpSpec, rng) -> Draw:
    if isinstance(spec.mode, LinearMode):
        data, truth, beta0 = simulate_linear(spec, rng=rng)
        return Draw(data, truth, beta0)
    data, truth, tau, g = simulate_nonlinear(spec, rng=rng)
    return Draw(data, truth, tau, g, Transform.indicator_above(spec.threshold()))


# -- standard estimators (module-level so worker processes can import them) --


def mc_classical(draw: Draw) -> float:
    return classical_eiv(sample_moments(draw.data)).beta


def mc_shrinkage(draw: Draw) -> float:
    return shrinkage_estimator(draw.data).beta


def mc_oracle(draw: Draw) -> float:
    return oracle_tau(draw.data, draw.prior, draw.transform).tau


def mc_plugin(draw: Draw) -> float:
    return plugin_tau(draw.data, draw.prior, draw.transform).tau


@dataclass(frozen=True)
class NpebEstimator:
    config: NpmleConfig = field(default_factory=lambda: NpmleConfig(method="cnm"))

    def __call__(self, draw: Draw) -> float:
        return npeb_tau(draw.data, draw.transform, self.config).tau


LINEAR_MC_ESTIMATORS = {"classical": mc_classical, "shrinkage": mc_shrinkage}
NONLINEAR_MC_ESTIMATORS = {"oracle": mc_oracle, "npeb": NpebEstimator(), "plugin": mc_plugin}


def default_linear_grid():
    """Scaled ``beta_mu`` in {-.3, ..., .3} (11 points) x scaled ``beta_sigma``
    in {0, ..., .3} (7 points)."""
    bm = np.round(np.linspace(-0.3, 0.3, 11), 10)
    bs = np.round(np.linspace(0.0, 0.3, 7), 10)
    return [(float(a), float(b)) for a in bm for b in bs]


# ---------------------------------------------------------------------------
# Monte Carlo runner
# ---------------------------------------------------------------------------

STATISTICS = ("true", "mean", "bias", "variance", "mse", "sd", "mcse", "reps", "failures")


@dataclass(frozen=True, eq=False)
class McSummary:
    """Per-cell, per-estimator replication statistics.

    ``estimates[c, e, r]`` holds replication ``r`` of estimator ``e`` in cell
    ``c`` (NaN where the estimator failed). ``reps`` counts attempted
    replications and ``failures`` the excluded ones; the moments use the
    successful draws only. ``variance`` and ``mse`` use divisor R so that
    ``mse = bias^2 + variance``; ``sd``/``mcse`` use R - 1.
    """

    coord_names: tuple
    coords: tuple
    estimator_names: tuple
    truth: np.ndarray
    estimates: np.ndarray
    seed: int

    def _ok(self, c, e):
        v = self.estimates[c, e]
        return v[np.isfinite(v)]

    def stats(self, cell: int, estimator: Union[int, str]) -> dict:
        e = estimator if isinstance(estimator, int) else self.estimator_names.index(estimator)
        v = self._ok(cell, e)
        t = float(self.truth[cell])
        reps = int(v.size)
        total = int(self.estimates.shape[2])
        out = {"true": t, "reps": total, "failures": total - reps}
        if reps == 0:
            out.update({k: float("nan") for k in ("mean", "bias", "variance", "mse", "sd", "mcse")})
            return out
        mean = float(np.mean(v))
        var = float(np.mean((v - mean) ** 2))
        sd = float(np.std(v, ddof=1)) if reps > 1 else float("nan")
        out.update(
            mean=mean,
            bias=mean - t,
            variance=var,
            mse=float(np.mean((v - t) ** 2)),
            sd=sd,
            mcse=sd / math.sqrt(reps) if reps > 1 else float("nan"),
        )
        return out

    def log_mse_ratio(self, cell: int, numerator: str, denominator: str) -> float:
        return math.log(self.stats(cell, numerator)["mse"] / self.stats(cell, denominator)["mse"])

    def flagged_cells(self, threshold: float = 0.1) -> list:
        reps = self.estimates.shape[2]
        fails = (~np.isfinite(self.estimates)).sum(axis=2)
        return [int(c) for c in np.flatnonzero((fails > threshold * reps).any(axis=1))]

    def to_csv(self, path) -> None:
        """Long format: cell, <coords>, estimator, statistic, value."""
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell", *self.coord_names, "estimator", "statistic", "value"])
            for c, coord in enumerate(self.coords):
                for e, name in enumerate(self.estimator_names):
                    st = self.stats(c, e)
                    for key in STATISTICS:
                        w.writerow([c, *map(repr, coord), name, key, repr(st[key])])

    def draws_to_csv(self, path) -> None:
        """Per-replication estimates: cell, <coords>, rep, estimator, estimate, true."""
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell", *self.coord_names, "rep", "estimator", "estimate", "true"])
            for c, coord in enumerate(self.coords):
                for r in range(self.estimates.shape[2]):
                    for e, name in enumerate(self.estimator_names):
                        w.writerow(
                            [c, *map(repr, coord), r, name, repr(float(self.estimates[c, e, r])),
                             repr(float(self.truth[c]))]
                        )


def _run_task(args):
    spec, estimators, seed, cell, reps = args
    from threadpoolctl import threadpool_limits

    out = np.full((len(estimators), len(reps)), np.nan)
    with threadpool_limits(1):
        for j, r in enumerate(reps):
            draw = simulate(spec, stream(seed, cell, r))
            for e, fn in enumerate(estimators):
                try:
                    out[e, j] = fn(draw)
                except LatentRegError:
                    pass
    return cell, reps, out


def _chunks(reps, size):
    return [list(range(i, min(i + size, reps))) for i in range(0, reps, size)]


def run_monte_carlo(
    specs: Sequence,
    estimators: dict,
    reps: int,
    seed: int,
    workers: int = 1,
    coord_names: Sequence[str] = ("cell",),
    chunk: int = 25,
) -> McSummary:
    """Replicate every cell ``reps`` times and summarize each estimator.

    ``specs`` is a sequence of ``(coords, DgpSpec)`` pairs (or bare specs).
    Replication ``r`` of cell ``c`` draws from stream ``(seed, c, r)``; results
    are placed by index, so output does not depend on ``workers``.
    """
    if reps < 2:
        raise InputError("reps must be at least 2")
    seed = check_seed(seed)
    cells = [s if isinstance(s, tuple) else ((i,), s) for i, s in enumerate(specs)]
    names = tuple(estimators)
    fns = [estimators[k] for k in names]
    truth = np.empty(len(cells))
    for c, (_, spec) in enumerate(cells):
        truth[c] = true_beta0(spec) if isinstance(spec.mode, LinearMode) else spec.mode.tau
    tasks = [
        (spec, fns, seed, c, chunk_reps)
        for c, (_, spec) in enumerate(cells)
        for chunk_reps in _chunks(reps, chunk)
    ]
    est = np.full((len(cells), len(names), reps), np.nan)
    if workers <= 1:
        results = map(_run_task, tasks)
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        results = pool.map(_run_task, tasks)
    try:
        for cell, chunk_reps, out in results:
            est[cell][:, chunk_reps] = out
    finally:
        if workers > 1:
            pool.shutdown()
    return McSummary(
        tuple(coord_names),
        tuple(tuple(coord) for coord, _ in cells),
        names,
        truth,
        est,
        seed,
    )


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
