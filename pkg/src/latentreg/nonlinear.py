"""Estimators of ``tau`` in ``Y = rho + tau * f(mu) + eta`` for known nonlinear ``f``.

* oracle -- OLS of Y on ``E_G[f(mu) | X, sigma]`` under the supplied (true) prior.
* npeb   -- the same regressor under an NPMLE prior fitted to ``(X, sigma)``.
* plugin -- OLS of Y on ``f(E[mu | X, sigma])``; inconsistent for nonlinear ``f``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .data import ObservationSet
from .errors import DegenerateEstimateError
from .linear import FLOOR, GaussianPrior
from .moments import moments_from_arrays
from .priors import (
    DiscretePrior,
    NpmleConfig,
    Transform,
    fit_npmle,
    posterior_mean,
)

__all__ = ["TauEstimate", "TAU_IDS", "oracle_tau", "npeb_tau", "plugin_tau", "regress_on"]

TAU_IDS = ("oracle", "npeb", "plugin")

Prior = Union[GaussianPrior, DiscretePrior]


@dataclass(frozen=True, eq=False)
class TauEstimate:
    estimator_id: str
    tau: float
    rho: float
    regressor_variance: float
    prior_used: Optional[Prior] = None
    meta: Optional[dict] = None

    def __post_init__(self):
        if self.estimator_id not in TAU_IDS:
            raise ValueError(f"unknown estimator id {self.estimator_id!r}")
        if not np.isfinite(self.tau) or not self.regressor_variance > 0:
            raise DegenerateEstimateError(f"{self.estimator_id}: degenerate estimate")

    def to_dict(self) -> dict:
        out = {
            "estimator_id": self.estimator_id,
            "tau": float(self.tau),
            "rho": float(self.rho),
            "regressor_variance": float(self.regressor_variance),
        }
        if isinstance(self.prior_used, GaussianPrior):
            out["prior"] = {"kind": "gaussian", **self.prior_used.to_dict()}
        elif isinstance(self.prior_used, DiscretePrior):
            out["prior"] = {
                "kind": "discrete",
                "atoms": int(self.prior_used.support.size),
                "mean": self.prior_used.mean,
                "variance": self.prior_used.variance,
            }
        if self.meta:
            out["meta"] = dict(self.meta)
        return out


def regress_on(y, regressor, estimator_id, prior=None, scale=1.0, meta=None) -> TauEstimate:
    """OLS of ``y`` on one regressor with intercept.

    Fails when the regressor variance is below ``FLOOR * scale``; ``scale`` is
    the variance scale of the regressor's natural range (``f`` bound squared,
    or var(X) for the identity).
    """
    r = np.asarray(regressor, dtype=float)
    m = moments_from_arrays(y, r, np.zeros_like(r))
    floor = max(FLOOR * scale, np.finfo(float).tiny)
    if not m.var_x > floor:
        raise DegenerateEstimateError(
            f"{estimator_id}: degenerate regressor (variance {m.var_x!r})",
            regressor_variance=m.var_x,
        )
    tau = m.cov_xy / m.var_x
    return TauEstimate(estimator_id, tau, m.mean_y - tau * m.mean_x, m.var_x, prior, meta)


def _scale(data: ObservationSet, f: Transform) -> float:
    b = f.bound
    return float(np.var(data.x)) if not np.isfinite(b) else max(b * b, np.finfo(float).tiny)


def oracle_tau(data: ObservationSet, true_prior: Prior, f: Transform) -> TauEstimate:
    """Regress y on the posterior mean of ``f(mu)`` under ``true_prior``."""
    reg = posterior_mean(true_prior, f, data.x, data.sigma)
    return regress_on(data.y, reg, "oracle", true_prior, _scale(data, f))


def npeb_tau(
    data: ObservationSet, f: Transform, npmle_config: Optional[NpmleConfig] = None
) -> TauEstimate:
    """Fit the NPMLE prior to ``(X, sigma)`` then proceed as :func:`oracle_tau`."""
    cfg = npmle_config or NpmleConfig()
    fit = fit_npmle(
        data,
        grid_size=cfg.grid_size,
        tol=cfg.tol,
        max_iter=cfg.max_iter,
        support=cfg.support,
        method=cfg.method,
    )
    reg = posterior_mean(fit.prior, f, data.x, data.sigma)
    meta = {
        "npmle_loglik": fit.loglik,
        "npmle_iterations": fit.n_iter,
        "npmle_converged": fit.converged,
    }
    return regress_on(data.y, reg, "npeb", fit.prior, _scale(data, f), meta)


def plugin_tau(data: ObservationSet, prior: Prior, f: Transform) -> TauEstimate:
    """Regress y on ``f`` evaluated at the posterior mean of ``mu``."""
    post = posterior_mean(prior, Transform.identity(), data.x, data.sigma)
    return regress_on(data.y, f(post), "plugin", prior, _scale(data, f))
