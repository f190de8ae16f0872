"""Log-likelihood, iterations and wall time of the NPMLE solvers on simulated data.

    python scripts/compare_npmle_solvers.py --n 10058 --fits 5
"""

import argparse
import time

from latentreg.priors import NPMLE_METHODS, fit_npmle
from latentreg.rng import stream
from latentreg.simulation import NonlinearMode, default_spec, simulate_nonlinear


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=10058)
    p.add_argument("--fits", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    base = default_spec()
    g = base.unconditional_prior()
    spec = base.with_mode(NonlinearMode(0.75, 1.0, 1.0, g.mu, g.sigma_mu2))
    print("fit method loglik iterations seconds")
    for k in range(args.fits):
        data = simulate_nonlinear(spec, n=args.n, rng=stream(args.seed, k))[0]
        for method in NPMLE_METHODS:
            t0 = time.perf_counter()
            fit = fit_npmle(data, method=method)
            print(f"{k} {method} {fit.loglik:.4f} {fit.n_iter} {time.perf_counter() - t0:.2f}")


if __name__ == "__main__":
    main()
