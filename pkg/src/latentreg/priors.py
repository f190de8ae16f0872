"""Discrete (NPMLE) priors, transforms and posterior-mean functionals.

The NPMLE maximizes the heteroskedastic Gaussian mixture log-likelihood::

    l(m) = sum_i log sum_k m_k * phi((X_i - s_k) / sigma_i) / sigma_i

over masses ``m`` on a fixed grid ``s``. We use EM (the multiplicative
fixed-point update ``m_k <- m_k * mean_i L_ik / f_i``), which never decreases
``l``. All densities are evaluated in log space.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import linalg, optimize, stats

from .data import ObservationSet
from .errors import DegenerateEstimateError, InputError
from .linear import GaussianPrior

__all__ = [
    "DiscretePrior",
    "Transform",
    "NpmleConfig",
    "NpmleFit",
    "default_grid",
    "fit_npmle",
    "posterior_mean_gaussian",
    "posterior_mean_discrete",
    "posterior_mean",
    "posterior_weights",
    "GH_NODES",
]

GH_NODES = 64
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
_gh_t, _gh_w = np.polynomial.hermite.hermgauss(GH_NODES)


@dataclass(frozen=True, eq=False)
class DiscretePrior:
    """Finitely supported prior: ``mass[k]`` on atom ``support[k]``."""

    support: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        s = np.array(self.support, dtype=float)
        m = np.array(self.mass, dtype=float)
        if s.ndim != 1 or s.shape != m.shape or s.size == 0:
            raise InputError("support and mass must be 1-d arrays of equal nonzero length")
        if not (np.isfinite(s).all() and np.isfinite(m).all()):
            raise InputError("support and mass must be finite")
        if s.size > 1 and not np.all(np.diff(s) > 0):
            raise InputError("support must be strictly increasing")
        if (m < 0).any() or abs(m.sum() - 1.0) > 1e-10:
            raise InputError(f"masses must be nonnegative and sum to 1 (sum={m.sum()!r})")
        s.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "mass", m)

    @classmethod
    def point_mass(cls, at: float) -> "DiscretePrior":
        return cls(np.array([at]), np.array([1.0]))

    @property
    def mean(self) -> float:
        return float(self.mass @ self.support)

    @property
    def variance(self) -> float:
        return float(self.mass @ (self.support - self.mean) ** 2)

    def quantile(self, q: float) -> float:
        cdf = np.cumsum(self.mass)
        return float(self.support[min(np.searchsorted(cdf, q), self.support.size - 1)])

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["support", "mass"])
            for s, m in zip(self.support, self.mass):
                w.writerow([repr(float(s)), repr(float(m))])

    @classmethod
    def from_csv(cls, path) -> "DiscretePrior":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or not {"support", "mass"} <= set(rows[0]):
            raise InputError(f"{path}: expected columns support,mass")
        return cls([float(r["support"]) for r in rows], [float(r["mass"]) for r in rows])


@dataclass(frozen=True, eq=False)
class Transform:
    """A known function ``f`` of the latent attribute.

    ``kind`` is ``"identity"``, ``"indicator_above"`` (``1(mu > threshold)``,
    strict) or ``"user_table"`` (piecewise-linear through ``table``, flat
    beyond its ends).
    """

    kind: str
    threshold: Optional[float] = None
    table: Optional[tuple] = None

    def __post_init__(self):
        if self.kind == "indicator_above":
            if self.threshold is None or not np.isfinite(self.threshold):
                raise InputError("indicator_above needs a finite threshold")
        elif self.kind == "user_table":
            xs, fs = (np.asarray(a, dtype=float) for a in self.table)
            if xs.ndim != 1 or xs.shape != fs.shape or xs.size < 2:
                raise InputError("user_table needs at least two (x, f(x)) pairs")
            if not np.all(np.diff(xs) > 0) or not np.isfinite(fs).all():
                raise InputError("user_table x values must be strictly increasing, f finite")
            object.__setattr__(self, "table", (xs, fs))
        elif self.kind != "identity":
            raise InputError(f"unknown transform kind {self.kind!r}")

    @classmethod
    def identity(cls) -> "Transform":
        return cls("identity")

    @classmethod
    def indicator_above(cls, threshold: float) -> "Transform":
        return cls("indicator_above", threshold=float(threshold))

    @classmethod
    def from_table(cls, xs, fs) -> "Transform":
        return cls("user_table", table=(xs, fs))

    @classmethod
    def parse(cls, text: str) -> "Transform":
        """``identity`` | ``indicator:MU0`` | ``table:PATH`` (CSV with columns x,f)."""
        kind, _, arg = text.partition(":")
        if kind == "identity":
            return cls.identity()
        if kind in ("indicator", "indicator_above"):
            try:
                return cls.indicator_above(float(arg))
            except ValueError:
                raise InputError(f"bad indicator threshold {arg!r}") from None
        if kind == "table":
            with Path(arg).open(newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            return cls.from_table([float(r["x"]) for r in rows], [float(r["f"]) for r in rows])
        raise InputError(f"cannot parse transform {text!r}")

    @property
    def bound(self) -> float:
        """Declared sup-norm bound (infinite for the identity)."""
        if self.kind == "identity":
            return np.inf
        if self.kind == "indicator_above":
            return 1.0
        return float(np.max(np.abs(self.table[1])))

    def __call__(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "identity":
            return mu
        if self.kind == "indicator_above":
            return (mu > self.threshold).astype(float)
        xs, fs = self.table
        return np.interp(mu, xs, fs)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.threshold is not None:
            out["threshold"] = self.threshold
        if self.table is not None:
            out["table"] = {"x": self.table[0].tolist(), "f": self.table[1].tolist()}
        return out


# ---------------------------------------------------------------------------
# NPMLE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NpmleConfig:
    grid_size: int = 300
    tol: float = 1e-8
    max_iter: int = 2000
    support: Optional[tuple] = None  # explicit grid overrides grid_size
    method: str = "em"

    def __post_init__(self):
        if self.method not in NPMLE_METHODS:
            raise InputError(f"unknown NPMLE method {self.method!r}")
        if self.support is None and self.grid_size < 2:
            raise InputError("grid_size must be at least 2")
        if self.tol < 0 or self.max_iter < 1:
            raise InputError("tol must be >= 0 and max_iter >= 1")


@dataclass(frozen=True, eq=False)
class NpmleFit:
    prior: DiscretePrior
    loglik: float
    n_iter: int
    converged: bool
    history: np.ndarray = field(repr=False)


NPMLE_METHODS = ("em", "squarem", "cnm")


def default_grid(data: ObservationSet, grid_size: int = 300) -> np.ndarray:
    """Equispaced atoms on ``[min X - max(sigma)/2, max X + max(sigma)/2]``."""
    pad = 0.5 * float(data.sigma.max())
    return np.linspace(data.x.min() - pad, data.x.max() + pad, grid_size)


def _log_kernel(x, sigma, support):
    z = (x[:, None] - support[None, :]) / sigma[:, None]
    return -0.5 * z * z - np.log(sigma)[:, None] - _LOG_SQRT_2PI


def fit_npmle(
    data: ObservationSet,
    grid_size: int = 300,
    tol: float = 1e-8,
    max_iter: int = 2000,
    support=None,
    method: str = "em",
) -> NpmleFit:
    """Kiefer-Wolfowitz NPMLE of the prior of ``mu`` on a fixed grid.

    Starts from uniform masses and iterates until the relative log-likelihood
    gain falls below ``tol`` or ``max_iter`` updates have been made.
    ``history[t]`` is the log-likelihood after ``t`` accepted updates.

    ``method="em"`` takes plain EM steps. ``method="squarem"`` extrapolates
    two EM steps (SqS3 step length) and keeps the extrapolated point only if
    it does not lower the likelihood, so the ascent property is preserved;
    each accepted update then costs three EM maps. ``method="cnm"`` takes
    constrained-Newton steps with a monotone line search; it typically needs
    tens rather than hundreds of updates on large samples.
    """
    cfg = NpmleConfig(
        grid_size, tol, max_iter, None if support is None else tuple(support), method
    )
    s = default_grid(data, cfg.grid_size) if support is None else np.asarray(support, float)
    logk = _log_kernel(data.x, data.sigma, s)
    shift = logk.max(axis=1)
    if not np.isfinite(shift).all():
        raise DegenerateEstimateError("non-finite likelihood in NPMLE (overflow)")
    kern = np.exp(logk - shift[:, None])
    kern_t = np.ascontiguousarray(kern.T)
    shift_total = float(np.sum(shift))
    n = data.n

    def density(mass):
        f = kern @ mass
        if not (f > 0).all():
            raise DegenerateEstimateError("mixture density underflowed in NPMLE")
        return f

    def loglik(f):
        return float(np.sum(np.log(f))) + shift_total

    def em_map(mass, f):
        new = mass * (kern_t @ (1.0 / f)) / n
        return new / new.sum()

    mass = np.full(s.size, 1.0 / s.size)
    f = density(mass)
    ll = loglik(f)
    history = [ll]
    converged = False
    it = 0
    while it < cfg.max_iter:
        if method == "cnm":
            cand, fc = _cnm_step(kern, mass, f, loglik, em_map)
            new = loglik(fc)
            if new < ll:
                new, cand, fc = ll, mass, f
            mass, f = cand, fc
            it += 1
            history.append(new)
            gain = new - ll
            ll = new
            if gain <= cfg.tol * abs(ll):
                converged = True
                break
            continue
        m1 = em_map(mass, f)
        f1 = density(m1)
        cand, fc = m1, f1
        if method == "squarem":
            m2 = em_map(m1, f1)
            f2 = density(m2)
            cand, fc = m2, f2
            r = m1 - mass
            v = m2 - m1 - r
            vn = np.sqrt(v @ v)
            if vn > 0:
                alpha = min(-np.sqrt(r @ r) / vn, -1.0)
                ext = mass - 2.0 * alpha * r + alpha * alpha * v
                ext = np.clip(ext, 0.0, None)
                if ext.sum() > 0:
                    ext /= ext.sum()
                    fe = kern @ ext
                    if (fe > 0).all():
                        m3 = em_map(ext, fe)
                        f3 = density(m3)
                        if loglik(f3) >= loglik(f2):
                            cand, fc = m3, f3
        new = loglik(fc)
        if new < ll:  # rounding at convergence; keep the better iterate
            new, cand, fc = ll, mass, f
        mass, f = cand, fc
        it += 1
        history.append(new)
        gain = new - ll
        ll = new
        if gain <= cfg.tol * abs(ll):
            converged = True
            break
    prior = DiscretePrior(s, mass)
    return NpmleFit(prior, ll, it, converged, np.array(history))


def _cnm_step(kern, mass, f, loglik, em_map):
    """One constrained-Newton update.

    The log-likelihood is replaced by its quadratic expansion in ``K w / f``;
    minimizing ``||S a - 2||^2`` over ``a >= 0`` with ``sum(a) = 1`` enforced by
    a heavily weighted extra row (an NNLS problem) on the current support plus
    the local maxima of the gradient gives a target, and a backtracking line
    search towards it guarantees ascent.
    """
    n = f.size
    grad = kern.T @ (1.0 / f)
    peak = np.empty(grad.size, dtype=bool)
    peak[0] = grad[0] >= grad[1]
    peak[-1] = grad[-1] >= grad[-2]
    peak[1:-1] = (grad[1:-1] >= grad[:-2]) & (grad[1:-1] >= grad[2:])
    idx = np.flatnonzero((mass > 0) | (peak & (grad > n)))
    eta = 10.0 * np.sqrt(n)
    aug = np.empty((n + 1, idx.size + 1))
    aug[:n, :-1] = kern[:, idx] / f[:, None]
    aug[n, :-1] = eta
    aug[:n, -1] = 2.0
    aug[n, -1] = eta
    # same least-squares objective on k + 1 rows instead of n + 1
    r = linalg.qr(aug, mode="r", overwrite_a=True, check_finite=False)[0][: idx.size + 1]
    try:
        a, _ = optimize.nnls(r[:, :-1], r[:, -1], maxiter=50 * idx.size)
    except RuntimeError:
        a = None
    if a is None or not a.sum() > 0:
        new = em_map(mass, f)
        return new, kern @ new
    target = np.zeros_like(mass)
    target[idx] = a / a.sum()
    step = target - mass
    slope = float(grad @ step)
    ll = loglik(f)
    lam = 1.0
    while lam > 1e-12:
        cand = mass + lam * step
        fc = kern @ cand
        if (fc > 0).all() and loglik(fc) >= ll + 1e-4 * lam * slope:
            cand = np.where(cand > 0, cand, 0.0)
            cand /= cand.sum()
            return cand, kern @ cand
        lam *= 0.5
    new = em_map(mass, f)
    return new, kern @ new


# ---------------------------------------------------------------------------
# Posterior means
# ---------------------------------------------------------------------------


def _gaussian_posterior(prior: GaussianPrior, x, sigma):
    s2 = np.asarray(sigma, dtype=float) ** 2
    x = np.asarray(x, dtype=float)
    shrink = s2 / (s2 + prior.sigma_mu2)
    mean = prior.mu + (1.0 - shrink) * (x - prior.mu)
    var = prior.sigma_mu2 * s2 / (prior.sigma_mu2 + s2)
    return mean, var


def posterior_mean_gaussian(prior: GaussianPrior, f: Transform, x, sigma):
    """``E[f(mu) | X=x, sigma]`` under a normal prior (vectorized).

    Identity is closed form, the indicator uses the normal tail, and tables use
    64-node Gauss-Hermite quadrature over the normal posterior.
    """
    if np.any(np.asarray(sigma) <= 0):
        raise InputError("sigma must be positive")
    mean, var = _gaussian_posterior(prior, x, sigma)
    if f.kind == "identity":
        return mean
    sd = np.sqrt(var)
    if f.kind == "indicator_above":
        return stats.norm.sf((f.threshold - mean) / sd)
    nodes = mean[..., None] + np.sqrt(2.0) * sd[..., None] * _gh_t
    return f(nodes) @ _gh_w / np.sqrt(np.pi)


def posterior_weights(prior: DiscretePrior, x, sigma):
    """Posterior masses over the atoms, shape ``(len(x), K)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), x.shape)
    with np.errstate(divide="ignore"):
        logm = np.log(prior.mass)
    logp = _log_kernel(x, sigma, prior.support) + logm
    top = logp.max(axis=1)
    bad = ~np.isfinite(top)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DegenerateEstimateError(
            "posterior underflow: observation too far from the prior support",
            index=i,
            x=float(x[i]),
            sigma=float(sigma[i]),
            support_min=float(prior.support[0]),
            support_max=float(prior.support[-1]),
        )
    w = np.exp(logp - top[:, None])
    return w / w.sum(axis=1, keepdims=True)


def posterior_mean_discrete(prior: DiscretePrior, f: Transform, x, sigma):
    """``E[f(mu) | X=x, sigma]`` under a discrete prior (vectorized)."""
    scalar = np.ndim(x) == 0
    if np.any(np.asarray(sigma) <= 0):
        raise InputError("sigma must be positive")
    out = posterior_weights(prior, x, sigma) @ f(prior.support)
    return float(out[0]) if scalar else out


def posterior_mean(prior: Union[GaussianPrior, DiscretePrior], f: Transform, x, sigma):
    if isinstance(prior, GaussianPrior):
        return posterior_mean_gaussian(prior, f, x, sigma)
    if isinstance(prior, DiscretePrior):
        return posterior_mean_discrete(prior, f, x, sigma)
    raise TypeError(f"unsupported prior type {type(prior).__name__}")

