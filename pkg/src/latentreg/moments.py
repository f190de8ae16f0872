"""Sample moments with the 1/n divisor and Frisch-Waugh-Lovell partialling.

All moments are population analogues::

    E_n[w]      = sum(w) / n
    var_n(w)    = E_n[(w - E_n[w])**2]
    cov_n(w, v) = E_n[(w - E_n[w]) (v - E_n[v])]

Weighted versions replace ``1/n`` by normalized weights ``W_i = w_i / sum(w)``.
The centred form is algebraically identical to ``E_n[w**2] - E_n[w]**2`` but does
not lose precision when the mean is large relative to the spread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .data import ObservationSet
from .errors import InputError

__all__ = [
    "MomentSummary",
    "moments_from_arrays",
    "sample_moments",
    "weighted_moments",
    "partial_out",
    "pivoted_lstsq",
    "RANK_TOL",
]

RANK_TOL = 1e-12


@dataclass(frozen=True)
class MomentSummary:
    mean_y: float
    mean_x: float
    var_y: float
    var_x: float
    cov_xy: float
    mean_sigma2: float
    n: int
    weighted: bool = False

    def __post_init__(self):
        if self.var_x < 0 or self.var_y < 0:
            raise ValueError("variances must be nonnegative")
        bound = np.sqrt(self.var_x * self.var_y)
        if abs(self.cov_xy) > bound + 1e-10 * max(1.0, bound):
            raise ValueError("covariance violates Cauchy-Schwarz")

    @property
    def signal_variance(self) -> float:
        """``var_n(X) - E_n[sigma^2]``, the moment estimate of ``var(mu)``."""
        return self.var_x - self.mean_sigma2


def moments_from_arrays(y, x, sigma2, w=None, *, weighted=None) -> MomentSummary:
    """Moments straight from arrays; ``sigma2`` may contain zeros here."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if w is None:
        w = np.ones_like(y)
        weighted = False if weighted is None else weighted
    w = np.asarray(w, dtype=float)
    total = w.sum()
    if not total > 0:
        raise InputError("weights must have a positive sum")
    mean_y = float(np.sum(w * y) / total)
    mean_x = float(np.sum(w * x) / total)
    dy = y - mean_y
    dx = x - mean_x
    return MomentSummary(
        mean_y=mean_y,
        mean_x=mean_x,
        var_y=float(np.sum(w * dy * dy) / total),
        var_x=float(np.sum(w * dx * dx) / total),
        cov_xy=float(np.sum(w * dx * dy) / total),
        mean_sigma2=float(np.sum(w * sigma2) / total),
        n=int(y.shape[0]),
        weighted=True if weighted is None else weighted,
    )


def sample_moments(data: ObservationSet) -> MomentSummary:
    """Unweighted moments (stored weights are ignored)."""
    return moments_from_arrays(data.y, data.x, data.sigma2, np.ones(data.n), weighted=False)


def weighted_moments(data: ObservationSet, weights=None) -> MomentSummary:
    """Moments under normalized weights; defaults to ``data.weight``."""
    w = data.weight if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (data.n,):
        raise InputError(f"weights must have length {data.n}, got shape {w.shape}")
    if (w < 0).any() or not np.isfinite(w).all():
        raise InputError("weights must be finite and nonnegative")
    if not w.sum() > 0:
        raise InputError("all weights are zero")
    return moments_from_arrays(data.y, data.x, data.sigma2, w, weighted=True)


def pivoted_lstsq(design, targets, tol=RANK_TOL):
    """Least squares via column-pivoted QR.

    Returns ``(coef, rank, dropped)`` where ``dropped`` lists the design columns
    judged collinear (|R_kk| <= tol * |R_00|).
    """
    design = np.asarray(design, dtype=float)
    q, r, piv = linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > tol * diag[0])) if diag.size and diag[0] > 0 else 0
    dropped = sorted(int(p) for p in piv[rank:])
    if rank < design.shape[1]:
        return None, rank, dropped
    qt = q.T @ targets
    sol = linalg.solve_triangular(r, qt)
    coef = np.empty_like(sol)
    coef[piv] = sol
    return coef, rank, dropped


def partial_out(data: ObservationSet, weighted: bool | None = None) -> ObservationSet:
    """Residualize ``y`` and ``x`` on ``[1, Z]``; sigma and weights pass through.

    The projection is weighted by ``data.weight`` unless all weights are equal
    or ``weighted=False``. Covariates are dropped from the result.
    """
    if not data.has_covariates:
        raise InputError("partial_out needs covariates")
    z = data.covariates
    design = np.column_stack([np.ones(data.n), z])
    w = data.weight
    if weighted is None:
        weighted = not np.all(w == w[0])
    root = np.sqrt(w) if weighted else np.ones(data.n)
    targets = np.column_stack([data.y, data.x])
    coef, rank, dropped = pivoted_lstsq(design * root[:, None], targets * root[:, None])
    if coef is None:
        zcols = [d - 1 for d in dropped]
        # the intercept may be the pivot casualty when a Z column is constant
        if -1 in zcols:
            zcols = [c for c in zcols if c >= 0] or [
                j for j in range(z.shape[1]) if np.ptp(z[:, j]) == 0
            ]
        raise InputError(
            f"covariate matrix is rank deficient (rank {rank} of {design.shape[1]} with "
            f"intercept); collinear covariate column(s): {zcols}",
            columns=zcols,
            rank=rank,
        )
    resid = targets - design @ coef
    return ObservationSet(resid[:, 0], resid[:, 1], data.sigma, data.weight, None)
