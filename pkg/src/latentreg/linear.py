"""Estimators of the slope of ``y`` on the latent attribute ``mu``.

Unit-level estimators take an :class:`~latentreg.data.ObservationSet` (or its
:class:`~latentreg.moments.MomentSummary`); the disaggregated pair
:func:`loo_iv` / :func:`debiased_moment` take :class:`~latentreg.data.GroupedData`.

The classical errors-in-variables estimator::

    beta_hat = cov_n(Y, X) / (var_n(X) - E_n[sigma^2])

and the regress-on-shrinkage estimator::

    beta_tilde = cov_n(Y, mu_hat) / var_n(mu_hat)
    mu_hat_i   = s_i * m + (1 - s_i) * X_i,   s_i = sigma_i^2 / (sigma_i^2 + v)

with prior mean ``m = E_n[X]`` and prior variance ``v = var_n(X) - E_n[sigma^2]``.
Under constant ``sigma`` the two coincide exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import GroupedData, ObservationSet, aggregate
from .errors import DegenerateEstimateError, InputError
from .moments import (
    MomentSummary,
    moments_from_arrays,
    pivoted_lstsq,
    sample_moments,
    weighted_moments,
)

__all__ = [
    "ESTIMATOR_IDS",
    "FLOOR",
    "LinearEstimate",
    "GaussianPrior",
    "classical_eiv",
    "naive_ols",
    "fit_gaussian_prior",
    "linear_shrinkage",
    "regress_on_shrinkage",
    "shrinkage_estimator",
    "weighted_classical_eiv",
    "weighted_shrinkage",
    "two_sided_corrected",
    "estimate_cov12",
    "loo_iv",
    "debiased_moment",
    "LINEAR_ESTIMATORS",
    "run_linear",
]

ESTIMATOR_IDS = (
    "classical",
    "shrinkage",
    "weighted_classical",
    "weighted_shrinkage",
    "two_sided",
    "loo_iv",
    "debiased_moment",
    "naive_ols",
)

# relative floor on every variance-type denominator, as a multiple of var_n(X)
FLOOR = 1e-12


@dataclass(frozen=True)
class LinearEstimate:
    estimator_id: str
    beta: float
    intercept: float
    covariate_coefs: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.estimator_id not in ESTIMATOR_IDS:
            raise ValueError(f"unknown estimator id {self.estimator_id!r}")
        if not np.isfinite(self.beta):
            raise DegenerateEstimateError(
                f"{self.estimator_id}: non-finite slope", estimator=self.estimator_id
            )

    def to_dict(self) -> dict:
        out = {
            "estimator_id": self.estimator_id,
            "beta": float(self.beta),
            "intercept": float(self.intercept),
        }
        if self.covariate_coefs is not None:
            out["covariate_coefs"] = [float(c) for c in self.covariate_coefs]
        if self.meta:
            out["meta"] = _plain(self.meta)
        return out


@dataclass(frozen=True)
class GaussianPrior:
    """Normal prior ``mu ~ N(mu, sigma_mu2)``."""

    mu: float
    sigma_mu2: float
    floored: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.sigma_mu2)) or self.sigma_mu2 <= 0:
            raise InputError(
                f"Gaussian prior needs finite mean and positive variance, got "
                f"({self.mu!r}, {self.sigma_mu2!r})"
            )

    def to_dict(self) -> dict:
        return {"mu": float(self.mu), "sigma_mu2": float(self.sigma_mu2), "floored": self.floored}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _floor(var_x: float) -> float:
    return max(FLOOR * var_x, np.finfo(float).tiny)


# ---------------------------------------------------------------------------
# Unit-level estimators
# ---------------------------------------------------------------------------


def naive_ols(m: MomentSummary) -> LinearEstimate:
    """Uncorrected slope of y on x (attenuated towards zero)."""
    if not m.var_x > 0:
        raise DegenerateEstimateError("naive OLS: x has no variance", var_x=m.var_x)
    beta = m.cov_xy / m.var_x
    return LinearEstimate("naive_ols", beta, m.mean_y - beta * m.mean_x)


def classical_eiv(m: MomentSummary, estimator_id: str = "classical") -> LinearEstimate:
    """Measurement-error corrected slope ``cov / (var_x - E sigma^2)``.

    ``meta`` carries the naive slope and the inflation factor
    ``var_x / (var_x - E sigma^2)`` that maps one onto the other.
    """
    signal = m.var_x - m.mean_sigma2
    if not signal > FLOOR * m.var_x or not signal > 0:
        raise DegenerateEstimateError(
            "signal variance not identified in sample: "
            f"var_n(X) - E_n[sigma^2] = {signal!r}",
            signal_variance=signal,
            var_x=m.var_x,
            mean_sigma2=m.mean_sigma2,
        )
    beta = m.cov_xy / signal
    meta = {
        "signal_variance": signal,
        "naive_slope": m.cov_xy / m.var_x,
        "inflation_factor": m.var_x / signal,
        "weighted": m.weighted,
    }
    return LinearEstimate(estimator_id, beta, m.mean_y - beta * m.mean_x, meta=meta)


def fit_gaussian_prior(m: MomentSummary, source: str = "x") -> GaussianPrior:
    """Moment-fitted normal prior for the latent attribute.

    ``source="x"`` (default) uses ``E_n[X]`` and ``var_n(X) - E_n[sigma^2]``.
    ``source="y"`` reproduces the literal outcome-moment formula
    ``E_n[Y]`` and ``var_n(Y) - E_n[sigma^2]``. Variances below the floor are
    replaced by the floor and ``floored`` is set.
    """
    if source == "x":
        mu, total = m.mean_x, m.var_x
    elif source == "y":
        mu, total = m.mean_y, m.var_y
    else:
        raise ValueError("source must be 'x' or 'y'")
    v = total - m.mean_sigma2
    floor = _floor(m.var_x)
    if v < floor:
        return GaussianPrior(mu, floor, floored=True)
    return GaussianPrior(mu, v)


def linear_shrinkage(data: ObservationSet, prior: GaussianPrior) -> np.ndarray:
    """Posterior means ``E[mu | X_i, sigma_i]`` under a normal prior."""
    s2 = data.sigma2
    shrink = s2 / (s2 + prior.sigma_mu2)
    return prior.mu + (1.0 - shrink) * (data.x - prior.mu)


def _ols_on(y, r, w, var_scale, estimator_id, meta):
    mm = moments_from_arrays(y, r, np.zeros_like(r), w)
    if not mm.var_x > _floor(var_scale):
        raise DegenerateEstimateError(
            f"{estimator_id}: degenerate shrunk regressor (variance {mm.var_x!r})",
            regressor_variance=mm.var_x,
        )
    beta = mm.cov_xy / mm.var_x
    meta = dict(meta, regressor_variance=mm.var_x)
    return LinearEstimate(estimator_id, beta, mm.mean_y - beta * mm.mean_x, meta=meta)


def regress_on_shrinkage(
    data: ObservationSet, posterior_means, weights=None, estimator_id="shrinkage", meta=None
) -> LinearEstimate:
    """OLS (or WLS with ``weights``) of y on the shrunk regressor."""
    r = np.asarray(posterior_means, dtype=float)
    if r.shape != (data.n,):
        raise InputError(f"posterior means must have length {data.n}")
    var_scale = float(np.var(data.x))
    return _ols_on(data.y, r, weights, var_scale, estimator_id, meta or {})


def shrinkage_estimator(data: ObservationSet, source: str = "x") -> LinearEstimate:
    """Fit the normal prior, shrink, and regress y on the posterior means."""
    prior = fit_gaussian_prior(sample_moments(data), source=source)
    post = linear_shrinkage(data, prior)
    return regress_on_shrinkage(data, post, meta={"prior": prior, "prior_source": source})


def _weights(data: ObservationSet, weights):
    w = data.weight if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (data.n,):
        raise InputError(f"weights must have length {data.n}")
    return w


def two_sided_corrected(data: ObservationSet, weights=None, cov12=None) -> LinearEstimate:
    """Weighted corrected slope with measurement error on both sides.

    Subtracts ``sum_i W_i * cov12_i`` from the weighted covariance; with
    ``cov12`` identically zero this is exactly :func:`weighted_classical_eiv`.
    """
    w = _weights(data, weights)
    m = weighted_moments(data, w)
    if cov12 is None:
        cov12 = np.zeros(data.n)
    cov12 = np.asarray(cov12, dtype=float)
    if cov12.shape != (data.n,) or not np.isfinite(cov12).all():
        raise InputError(f"cov12 must be {data.n} finite values")
    correction = float(np.sum(w * cov12) / np.sum(w))
    # subtracting an exact 0.0 leaves the numerator bit-identical to the one-sided case
    est = classical_eiv(_with_cov(m, m.cov_xy - correction), estimator_id="two_sided")
    return LinearEstimate(
        "two_sided",
        est.beta,
        est.intercept,
        meta=dict(est.meta, cov12_correction=correction),
    )


def _with_cov(m: MomentSummary, cov: float) -> MomentSummary:
    # bypass the Cauchy-Schwarz check: the corrected numerator is not a covariance
    obj = object.__new__(MomentSummary)
    for k, v in dict(
        mean_y=m.mean_y,
        mean_x=m.mean_x,
        var_y=m.var_y,
        var_x=m.var_x,
        cov_xy=cov,
        mean_sigma2=m.mean_sigma2,
        n=m.n,
        weighted=True,
    ).items():
        object.__setattr__(obj, k, v)
    return obj


def weighted_classical_eiv(data: ObservationSet, weights=None) -> LinearEstimate:
    """Corrected slope under normalized weights (defaults to ``data.weight``)."""
    m = weighted_moments(data, _weights(data, weights))
    return classical_eiv(m, estimator_id="weighted_classical")


def weighted_shrinkage(data: ObservationSet, weights=None) -> LinearEstimate:
    """WLS of y on normal-prior posterior means; the prior uses weighted X moments."""
    w = _weights(data, weights)
    prior = fit_gaussian_prior(weighted_moments(data, w))
    post = linear_shrinkage(data, prior)
    return regress_on_shrinkage(
        data, post, weights=w, estimator_id="weighted_shrinkage", meta={"prior": prior}
    )


def estimate_cov12(grouped: GroupedData) -> np.ndarray:
    """Per-group sampling covariance of ``(ybar_i, xbar_i)``.

    Within-group sample covariance (divisor ``N_i - 1``) divided by ``N_i``.
    """
    out = np.empty(grouped.n_groups)
    for i, g in enumerate(grouped.groups):
        n = g.size
        out[i] = np.sum((g.y - g.y.mean()) * (g.x - g.x.mean())) / (n - 1) / n
    return out


# ---------------------------------------------------------------------------
# Disaggregated estimators
# ---------------------------------------------------------------------------


def _leave_one_out(grouped: GroupedData):
    y, x, z, gid = grouped.stacked()
    sizes = grouped.sizes.astype(float)
    sums = np.bincount(gid, weights=x, minlength=grouped.n_groups)
    xloo = (sums[gid] - x) / (sizes[gid] - 1.0)
    return y, x, z, gid, xloo


def _unpack(theta, estimator_id, meta):
    cov = tuple(float(c) for c in theta[2:]) if theta.shape[0] > 2 else None
    return LinearEstimate(estimator_id, float(theta[1]), float(theta[0]), cov, meta)


def _first_stage(x, xloo, z, estimator_id):
    n = x.shape[0]
    base = np.ones((n, 1)) if z is None else np.column_stack([np.ones(n), z])
    coef, _, _ = pivoted_lstsq(base, np.column_stack([x, xloo]))
    if coef is None:
        raise InputError(f"{estimator_id}: covariates are collinear with the intercept")
    res = np.column_stack([x, xloo]) - base @ coef
    c = float(res[:, 0] @ res[:, 1])
    scale = float(np.sqrt((res[:, 0] @ res[:, 0]) * (res[:, 1] @ res[:, 1])))
    if not abs(c) > FLOOR * scale or scale == 0:
        raise DegenerateEstimateError(
            f"{estimator_id}: zero first stage (instrument uncorrelated with x)",
            first_stage_cov=c / n,
        )
    return c / n


def _solve(a, b, estimator_id):
    coef, rank, dropped = pivoted_lstsq(a, b)
    if coef is None:
        raise DegenerateEstimateError(
            f"{estimator_id}: singular moment matrix (rank {rank}), columns {dropped}",
            rank=rank,
        )
    return coef


def loo_iv(grouped: GroupedData) -> LinearEstimate:
    """Student-level IV of y on x (plus intercept and z) with the leave-one-out mean.

    The instrument for ``x_ij`` is ``mean_{k != j} x_ik`` within the same group.
    """
    y, x, z, _, xloo = _leave_one_out(grouped)
    fs = _first_stage(x, xloo, z, "loo_iv")
    n = y.shape[0]
    ones = np.ones(n)
    inst = np.column_stack([ones, xloo] + ([] if z is None else [z]))
    regs = np.column_stack([ones, x] + ([] if z is None else [z]))
    theta = _solve(inst.T @ regs, inst.T @ y, "loo_iv")
    return _unpack(theta, "loo_iv", {"first_stage_cov": fs, "n_students": n})


def debiased_moment(grouped: GroupedData) -> LinearEstimate:
    """Plug-in normal equations with second moments of ``mu`` debiased.

    Every moment ``sum_j mu_i V_ij`` is replaced by
    ``sum_j xbar_i V_ij - sum_j V_ij (x_ij - xbar_i) / (N_i - 1)`` for
    ``V`` in ``{1, mu, z, y}``; the system is then solved for
    ``(intercept, slope, z coefficients)``.
    """
    y, x, z, gid, xloo = _leave_one_out(grouped)
    fs = _first_stage(x, xloo, z, "debiased_moment")
    k = grouped.n_groups
    sizes = grouped.sizes.astype(float)
    xbar = np.bincount(gid, weights=x, minlength=k) / sizes
    dev = x - xbar[gid]
    corr = 1.0 / (sizes[gid] - 1.0)

    def mu_moment(v):
        # sum over students of debiased mu_i * v_ij
        return float(np.sum(xbar[gid] * v) - np.sum(corr * v * dev))

    n = y.shape[0]
    p = 2 + (0 if z is None else z.shape[1])
    a = np.empty((p, p))
    b = np.empty(p)
    a[0, 0] = n
    a[0, 1] = a[1, 0] = float(np.sum(x))
    a[1, 1] = mu_moment(x)
    b[0] = float(np.sum(y))
    b[1] = mu_moment(y)
    if z is not None:
        a[0, 2:] = a[2:, 0] = z.sum(axis=0)
        for j in range(z.shape[1]):
            a[1, 2 + j] = a[2 + j, 1] = mu_moment(z[:, j])
        a[2:, 2:] = z.T @ z
        b[2:] = z.T @ y
    theta = _solve(a, b, "debiased_moment")
    return _unpack(theta, "debiased_moment", {"first_stage_cov": fs, "n_students": n})


# ---------------------------------------------------------------------------
# Registry used by the bootstrap, CLI and Monte Carlo engine
# ---------------------------------------------------------------------------


def _unit(data):
    if isinstance(data, GroupedData):
        return aggregate(data)
    return data


def _require_groups(data, name):
    if not isinstance(data, GroupedData):
        raise InputError(f"estimator {name!r} needs student-level grouped data")
    return data


def _classical(data):
    return classical_eiv(sample_moments(_unit(data)))


def _naive(data):
    return naive_ols(sample_moments(_unit(data)))


def _shrinkage(data):
    return shrinkage_estimator(_unit(data))


def _weighted_classical(data):
    return weighted_classical_eiv(_unit(data))


def _weighted_shrinkage(data):
    return weighted_shrinkage(_unit(data))


def _two_sided(data):
    data = _require_groups(data, "two_sided")
    return two_sided_corrected(aggregate(data), cov12=estimate_cov12(data))


def _loo_iv(data):
    return loo_iv(_require_groups(data, "loo_iv"))


def _debiased(data):
    return debiased_moment(_require_groups(data, "debiased_moment"))


GROUPED_ONLY = ("two_sided", "loo_iv", "debiased_moment")

LINEAR_ESTIMATORS = {
    "classical": _classical,
    "shrinkage": _shrinkage,
    "weighted_classical": _weighted_classical,
    "weighted_shrinkage": _weighted_shrinkage,
    "two_sided": _two_sided,
    "loo_iv": _loo_iv,
    "debiased_moment": _debiased,
    "naive_ols": _naive,
}


def run_linear(name: str, data) -> LinearEstimate:
    """Run a registered estimator by id on unit-level or grouped data."""
    try:
        fn = LINEAR_ESTIMATORS[name]
    except KeyError:
        raise InputError(
            f"unknown estimator {name!r}; choose from {', '.join(LINEAR_ESTIMATORS)}"
        ) from None
    return fn(data)
