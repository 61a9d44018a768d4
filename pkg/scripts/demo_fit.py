"""Simulate a two-regime series, fit it by Newton and by EM, and compare with the truth.

    python scripts/demo_fit.py --n 5000 --seed 20240611
"""

import argparse
import sys

import numpy as np

from rsscore.em import em_fit
from rsscore.estimation import canonicalize_fit, newton_fit
from rsscore.model import make_gaussian_switching_model


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=5000)
    parser.add_argument("--seed", type=int, default=20240611)
    parser.add_argument("--ar-lags", type=int, default=0)
    args = parser.parse_args(argv)

    m = make_gaussian_switching_model(2, True, args.ar_lags)
    phi = [0.3] * args.ar_lags
    truth = m.pack([-1.0, 1.5], [1.0, 0.5], np.array([[0.95, 0.05], [0.1, 0.9]]), phi)
    data, _ = m.simulate(truth, args.n, seed=args.seed)
    theta0 = m.pack([-0.5, 1.0], [1.0, 1.0], np.array([[0.8, 0.2], [0.2, 0.8]]), [0.0] * args.ar_lags)

    nf = canonicalize_fit(m, newton_fit(m, theta0, data, grad_tol=1e-8), data)
    em = em_fit(m, theta0, data, tol=1e-10, max_iter=5000)
    print(f"newton: loglik {nf.loglik:.10f}  iterations {nf.iterations}  |score| {nf.score_norm:.1e}")
    print(f"em:     loglik {em.loglik:.10f}  iterations {em.iterations}")
    print(f"gap:    {abs(nf.loglik - em.loglik):.2e}\n")
    print(f"{'param':>10} {'truth':>9} {'newton':>9} {'se':>8} {'z':>6} {'em':>9}")
    for name, t, a, se, b in zip(m.param_names, truth, nf.theta_hat, nf.standard_errors, em.theta):
        print(f"{name:>10} {t:>9.4f} {a:>9.4f} {se:>8.4f} {(a - t) / se:>6.2f} {b:>9.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
