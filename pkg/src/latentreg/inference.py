"""Nonparametric bootstrap and the precision-independence diagnostics.

Bootstrap draw ``b`` resamples with the stream ``(seed, b)``; the diagnostic
battery uses ``(seed, test, b)``. Draws are reduced by index, so results do
not depend on the number of worker processes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import stats

from .data import GroupedData, ObservationSet, aggregate
from .errors import BootstrapUnstableError, InputError, LatentRegError
from .linear import GROUPED_ONLY, run_linear
from .moments import moments_from_arrays, partial_out
from .rng import check_seed, stream
from .simulation import local_linear_fit, rule_of_thumb_bandwidth

__all__ = [
    "BootstrapResult",
    "DiagnosticReport",
    "EstimatorSpec",
    "bootstrap",
    "diagnose_precision",
    "resample",
    "DIAGNOSTIC_IDS",
]

DIAGNOSTIC_IDS = ("y_on_log_sigma", "x_on_log_sigma", "condvar_constancy")
DEFAULT_B = 999

Data = Union[ObservationSet, GroupedData]


@dataclass(frozen=True)
class EstimatorSpec:
    """A registered linear estimator by name, optionally after partialling out Z.

    Partialling applies to the unit-level estimators; grouped data is first
    aggregated. The student-level estimators handle Z themselves.

    Calling it returns the slope. Instances pickle, so they can cross process
    boundaries.
    """

    name: str
    partial_out: bool = False

    def __call__(self, data: Data) -> float:
        return self.estimate(data).beta

    def estimate(self, data: Data):
        if self.partial_out and self.name not in GROUPED_ONLY:
            data = partial_out(aggregate(data) if isinstance(data, GroupedData) else data)
        return run_linear(self.name, data)


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    point: float
    draws: np.ndarray
    se: float
    ci: tuple
    failed_draws: int
    seed: int
    B: int
    level: float
    normal_ci: tuple

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "se": self.se,
            "ci": list(self.ci),
            "normal_ci": list(self.normal_ci),
            "level": self.level,
            "B": self.B,
            "failed_draws": self.failed_draws,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class DiagnosticReport:
    test_id: str
    coef: float
    se: float
    t_stat: float
    flagged: bool
    meta: Optional[dict] = None

    @property
    def verdict(self) -> str:
        return "flagged at 5%" if self.flagged else "not flagged at 5%"

    def to_dict(self) -> dict:
        out = {
            "test_id": self.test_id,
            "coef": self.coef,
            "se": self.se,
            "t_stat": self.t_stat,
            "flagged": self.flagged,
            "verdict": self.verdict,
        }
        if self.meta:
            out["meta"] = dict(self.meta)
        return out


def resample(data: Data, rng: np.random.Generator) -> Data:
    """One iid bootstrap sample: units for ObservationSet, whole groups for GroupedData."""
    if isinstance(data, GroupedData):
        return data.take(rng.integers(0, data.n_groups, data.n_groups))
    return data.take(rng.integers(0, data.n, data.n))


def _as_callable(estimator) -> Callable:
    if isinstance(estimator, str):
        return EstimatorSpec(estimator)
    if not callable(estimator):
        raise InputError("estimator must be a registered name or a callable")
    return estimator


def _draw(data, fn, seed, b):
    try:
        return float(fn(resample(data, stream(seed, b))))
    except LatentRegError:
        return math.nan


def _draw_chunk(args):
    data, fn, seed, idx = args
    return [_draw(data, fn, seed, b) for b in idx]


def _run_draws(data, fn, seed, B, workers):
    if workers <= 1:
        return np.array([_draw(data, fn, seed, b) for b in range(B)])
    size = max(1, math.ceil(B / (4 * workers)))
    chunks = [list(range(i, min(i + size, B))) for i in range(0, B, size)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(_draw_chunk, [(data, fn, seed, c) for c in chunks])
        return np.array([v for part in parts for v in part])


def bootstrap(
    data: Data,
    estimator: Union[str, Callable],
    B: int = DEFAULT_B,
    seed: int = 0,
    level: float = 0.95,
    workers: int = 1,
) -> BootstrapResult:
    """Nonparametric bootstrap of a scalar estimator.

    Draws on which the estimator raises are counted in ``failed_draws`` and
    left out; more than ``B / 2`` failures raise :class:`BootstrapUnstableError`.
    """
    if int(B) != B or B < 2:
        raise InputError(f"B must be an integer >= 2, got {B!r}")
    if not 0 < level < 1:
        raise InputError(f"level must lie in (0, 1), got {level!r}")
    B = int(B)
    seed = check_seed(seed)
    fn = _as_callable(estimator)
    point = float(fn(data))
    raw = _run_draws(data, fn, seed, B, workers)
    ok = np.isfinite(raw)
    failed = int(B - ok.sum())
    if failed > B / 2:
        raise BootstrapUnstableError(
            f"bootstrap unstable: {failed} of {B} draws failed", failed_draws=failed, B=B
        )
    draws = raw[ok]
    se = float(np.std(draws, ddof=1)) if draws.size > 1 else 0.0
    alpha = 1.0 - level
    lo, hi = np.quantile(draws, [alpha / 2, 1 - alpha / 2])
    z = float(stats.norm.ppf(1 - alpha / 2))
    return BootstrapResult(
        point,
        draws,
        se,
        (float(lo), float(hi)),
        failed,
        seed,
        B,
        float(level),
        (point - z * se, point + z * se),
    )


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def _slope(y, x) -> float:
    m = moments_from_arrays(y, x, np.zeros_like(x))
    return m.cov_xy / m.var_x


def _signal_variance_curve(sigma, x, h, grid):
    m_hat = local_linear_fit(sigma, x, h)
    v_hat = local_linear_fit(sigma, (x - m_hat(sigma)) ** 2, h)
    return v_hat(grid) - grid**2


def diagnose_precision(
    data: ObservationSet,
    B: int = DEFAULT_B,
    seed: int = 0,
    trim: float = 0.05,
    tests=DIAGNOSTIC_IDS,
) -> list:
    """Checks of independence between the latent attribute and its precision.

    * ``y_on_log_sigma`` / ``x_on_log_sigma``: OLS slope on ``log10 sigma`` with
      a bootstrap SE; flagged when ``|t| > 1.96``.
    * ``condvar_constancy``: ``R = max - min`` of the local linear estimate of
      ``var(X | sigma) - sigma^2`` on the 101-point grid (``trim`` of the sigma
      range dropped at each end). ``c`` is the 95% quantile of the bootstrap
      sup-norm deviation, so a constant fits inside the band iff ``R <= 2c``.
      Reported as ``coef = R``, ``se = c``, ``t = R / (2c)``; flagged when ``t > 1``.

    ``tests`` selects a subset of the battery; the streams do not depend on it.
    """
    if not isinstance(data, ObservationSet):
        raise InputError("diagnostics need unit-level data")
    if not np.ptp(data.sigma) > 0:
        raise InputError("diagnostics undefined under homoskedasticity (constant sigma)")
    if int(B) != B or B < 2:
        raise InputError(f"B must be an integer >= 2, got {B!r}")
    seed = check_seed(seed)
    unknown = set(tests) - set(DIAGNOSTIC_IDS)
    if unknown:
        raise InputError(f"unknown diagnostic(s): {', '.join(sorted(unknown))}")
    ls = np.log10(data.sigma)
    n = data.n
    reports = []
    for k, (tid, target) in enumerate((("y_on_log_sigma", data.y), ("x_on_log_sigma", data.x))):
        if tid not in tests:
            continue
        coef = _slope(target, ls)
        draws = np.empty(B)
        for b in range(B):
            idx = stream(seed, k, b).integers(0, n, n)
            draws[b] = _slope(target[idx], ls[idx])
        ok = np.isfinite(draws)
        se = float(np.std(draws[ok], ddof=1))
        t = coef / se if se > 0 else math.inf
        reports.append(DiagnosticReport(tid, float(coef), se, float(t), bool(abs(t) > 1.96)))

    if "condvar_constancy" not in tests:
        return reports
    sigma, x = data.sigma, data.x
    h = rule_of_thumb_bandwidth(sigma)
    lo, hi = sigma.min(), sigma.max()
    grid = np.linspace(lo + trim * (hi - lo), hi - trim * (hi - lo), 101)
    curve = _signal_variance_curve(sigma, x, h, grid)
    dev = np.empty(B)
    for b in range(B):
        idx = stream(seed, 2, b).integers(0, n, n)
        try:
            dev[b] = np.max(np.abs(_signal_variance_curve(sigma[idx], x[idx], h, grid) - curve))
        except LatentRegError:
            dev[b] = np.nan
    dev = dev[np.isfinite(dev)]
    if dev.size < 2:
        raise BootstrapUnstableError("bootstrap unstable: condvar band could not be formed")
    c = float(np.quantile(dev, 0.95))
    spread = float(curve.max() - curve.min())
    t = spread / (2 * c) if c > 0 else math.inf
    reports.append(
        DiagnosticReport(
            "condvar_constancy",
            spread,
            c,
            float(t),
            bool(t > 1),
            {"bandwidth": h, "grid_min": float(grid[0]), "grid_max": float(grid[-1])},
        )
    )
    return reports
