import json

import numpy as np
import pytest

from latentreg.data import ObservationSet
from latentreg.errors import BootstrapUnstableError, InputError
from latentreg.inference import (
    DIAGNOSTIC_IDS,
    EstimatorSpec,
    bootstrap,
    diagnose_precision,
    resample,
)
from latentreg.rng import stream

from conftest import grouped_sample, hetero_sample


def _mean_y(data):
    return float(np.mean(data.y))


def test_bootstrap_deterministic():
    data, _ = hetero_sample(300, seed=1)
    a = bootstrap(data, "classical", B=999, seed=11)
    b = bootstrap(data, "classical", B=999, seed=11)
    assert np.array_equal(a.draws, b.draws)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert bootstrap(data, "classical", B=50, seed=12).draws[0] != a.draws[0]


def test_bootstrap_workers_agree():
    data, _ = hetero_sample(300, seed=2)
    a = bootstrap(data, EstimatorSpec("classical"), B=60, seed=3, workers=1)
    b = bootstrap(data, EstimatorSpec("classical"), B=60, seed=3, workers=2)
    assert np.array_equal(a.draws, b.draws)


def test_bootstrap_se_of_mean():
    rng = np.random.default_rng(4)
    n = 5000
    y = rng.exponential(2.0, n)
    data = ObservationSet(y, rng.normal(size=n), np.full(n, 0.1))
    res = bootstrap(data, _mean_y, B=499, seed=5)
    target = np.std(y, ddof=1) / np.sqrt(n)
    assert abs(res.se - target) <= 0.2 * target


def test_bootstrap_invariants():
    data, _ = hetero_sample(200, seed=6)
    res = bootstrap(data, "shrinkage", B=199, seed=7, level=0.9)
    assert res.draws.size == res.B - res.failed_draws
    assert res.se >= 0 and res.ci[0] <= res.ci[1]
    assert res.ci[0] <= np.median(res.draws) <= res.ci[1]
    assert res.to_dict()["level"] == 0.9


def test_boundary_failures_are_reported():
    rng = np.random.default_rng(8)
    n = 60
    x = rng.normal(size=n)
    x = (x - x.mean()) / x.std() * np.sqrt(1.06)
    data = ObservationSet(x + rng.normal(size=n), x, np.ones(n))
    res = bootstrap(data, "classical", B=200, seed=9)
    assert 0 < res.failed_draws <= 100
    assert res.draws.size == 200 - res.failed_draws


def test_unstable_bootstrap_raises():
    calls = []

    def fragile(data):
        calls.append(1)
        if len(calls) > 1:
            from latentreg.errors import DegenerateEstimateError

            raise DegenerateEstimateError("negative signal variance")
        return 0.0

    data, _ = hetero_sample(50, seed=1)
    with pytest.raises(BootstrapUnstableError, match="bootstrap unstable") as e:
        bootstrap(data, fragile, B=20, seed=0)
    assert e.value.context["failed_draws"] == 20


def test_bootstrap_argument_checks():
    data, _ = hetero_sample(50, seed=1)
    with pytest.raises(InputError):
        bootstrap(data, "classical", B=1)
    with pytest.raises(InputError):
        bootstrap(data, "classical", B=10, level=1.5)
    with pytest.raises(InputError):
        bootstrap(data, "nonsense", B=10)


def test_grouped_resampling_keeps_whole_groups():
    g = grouped_sample(seed=3, n_groups=25)
    original = {grp.teacher_id: grp for grp in g.groups}
    for b in range(5):
        r = resample(g, stream(1, b))
        assert r.n_groups == g.n_groups
        for grp in r.groups:
            src = original[grp.teacher_id]
            assert np.array_equal(grp.y, src.y) and np.array_equal(grp.x, src.x)


def test_grouped_bootstrap_runs():
    g = grouped_sample(seed=4, n_groups=60, sizes=(5, 9))
    res = bootstrap(g, "loo_iv", B=50, seed=1)
    assert res.draws.size + res.failed_draws == 50
    assert res.point == pytest.approx(EstimatorSpec("debiased_moment")(g), rel=1e-8)


def test_estimator_spec_partial_out():
    g = grouped_sample(seed=5, n_groups=60, z="teacher", sizes=(5, 9))
    est = EstimatorSpec("classical", partial_out=True).estimate(g)
    assert np.isfinite(est.beta)


# -- diagnostics -------------------------------------------------------------


def test_diagnostics_need_dispersed_sigma(three_rows):
    with pytest.raises(InputError, match="diagnostics undefined under homoskedasticity"):
        diagnose_precision(three_rows)


def test_diagnostic_reports_shape():
    data, _ = hetero_sample(800, seed=3)
    reps = diagnose_precision(data, B=49, seed=2)
    assert [r.test_id for r in reps] == list(DIAGNOSTIC_IDS)
    for r in reps:
        assert r.se > 0
        d = r.to_dict()
        assert d["verdict"] in ("flagged at 5%", "not flagged at 5%")
    again = diagnose_precision(data, B=49, seed=2)
    assert [r.to_dict() for r in reps] == [r.to_dict() for r in again]


def test_y_on_log_sigma_size():
    rejections = 0
    for r in range(1000):
        data, _ = hetero_sample(300, seed=1000 + r)
        (rep,) = diagnose_precision(data, B=99, seed=r, tests=("y_on_log_sigma",))
        rejections += rep.flagged
    rate = rejections / 1000
    assert 0.025 <= rate <= 0.085, rate


def test_y_on_log_sigma_power():
    rejections = 0
    for r in range(40):
        data, _ = hetero_sample(10000, seed=2000 + r, beta_sigma=1.0)
        (rep,) = diagnose_precision(data, B=99, seed=r, tests=("y_on_log_sigma",))
        rejections += rep.flagged
    assert rejections / 40 > 0.95


def test_condvar_flags_heteroskedastic_signal():
    rng = np.random.default_rng(5)
    n = 4000
    sigma = rng.uniform(0.2, 1.0, n)
    mu = rng.normal(size=n) * (0.2 + 2.0 * sigma)
    data = ObservationSet(np.zeros(n), mu + sigma * rng.normal(size=n), sigma)
    (rep,) = diagnose_precision(data, B=99, seed=1, tests=("condvar_constancy",))
    assert rep.flagged and rep.t_stat > 1


def test_unknown_diagnostic():
    data, _ = hetero_sample(100, seed=3)
    with pytest.raises(InputError):
        diagnose_precision(data, tests=("bogus",))
