"""One-state linear-Gaussian closed loop with an analytic satisfaction probability.

``x_{t+1} = x_t + u_t + w_t`` with ``w_t ~ N(0, sigma^2)`` and the constraint
``x_t <= 1``. The feedback ``u_t = 1 - b_{t+1} - x_t`` puts the nominal state
exactly on the tightened bound, so ``x_{t+1} = 1 - b_{t+1} + w_t`` and the
joint satisfaction probability is ``prod_t Phi(b_t / sigma)``.
"""

import numpy as np
from scipy.stats import norm

from gpbackoff.backoff import sample_stream_id
from gpbackoff.numerics import RngStream


class LinearGaussianLoop:
    def __init__(self, T=3, sigma=0.1, S=500, seed=0, fresh=False):
        self.T, self.sigma, self.S, self.seed, self.fresh = T, sigma, S, seed, fresh

    def _b(self, backoffs):
        return np.zeros((self.T + 1, 1)) if backoffs is None else np.asarray(backoffs, dtype=float)

    def trajectory(self, backoffs, rng):
        b = self._b(backoffs)[:, 0]
        x = np.zeros(self.T + 1)
        for t in range(self.T):
            u = 1.0 - b[t + 1] - x[t]
            x[t + 1] = x[t] + u + self.sigma * rng.standard_normal()
        return x

    def constraints(self, x):
        g = (x - 1.0)[:, None]
        g[0] = -1.0
        return g

    def __call__(self, backoffs, iteration):
        G = np.empty((self.S, self.T + 1, 1))
        for s in range(self.S):
            rng = RngStream(self.seed, sample_stream_id(s, iteration, 0, self.fresh))
            G[s] = self.constraints(self.trajectory(backoffs, rng))
        return G, 0

    def nominal(self, backoffs):
        b = self._b(backoffs)[:, 0]
        x = 1.0 - b
        x[0] = 0.0
        return self.constraints(x)

    def probability(self, backoffs):
        b = self._b(backoffs)[1:, 0]
        return float(np.prod(norm.cdf(b / self.sigma)))
