"""Linear feature map over (state, action) shared by conservative-Q and FQE.

phi(s, a) = [onehot(a) (196), s_std (16), s_std * c_k(a) for k in vt, peep, fio2 (48)]

``c(a)`` holds the centred bin indices, so Q can tilt each setting's effect
by state while the one-hot block acts as a per-action intercept.
"""

from __future__ import annotations

import numpy as np

from ..mdp import ACTION_BINS, N_ACTIONS, N_FIO2, N_PEEP, N_VT

ACTION_CENTRE = np.array([4.0, 2.5, 4.0])
ACTION_CODES = ACTION_BINS.astype(float) - ACTION_CENTRE  # (196, 3)
GRID = (N_VT, N_PEEP, N_FIO2)  # flat action index is C order over this grid
_AXIS_CODES = tuple(np.arange(1, k + 1, dtype=float) - c for k, c in zip(GRID, ACTION_CENTRE))


def expected_codes(probs) -> np.ndarray:
    """(n, 3) expected centred bin index per setting under (n, 196) action probabilities."""
    n = len(probs)
    P = probs.reshape(n, GRID[0] * GRID[1], GRID[2])
    vp = P.sum(axis=2).reshape(n, GRID[0], GRID[1])
    marg = (vp.sum(axis=2), vp.sum(axis=1), P.sum(axis=1))
    return np.column_stack([(m * c[None, :]).sum(axis=1) for m, c in zip(marg, _AXIS_CODES)])


class FeatureMap:
    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.asarray(std, dtype=float)
        self.d_state = len(self.mean)
        self.dim = N_ACTIONS + self.d_state * 4

    @classmethod
    def fit(cls, states):
        states = np.ascontiguousarray(states, dtype=float)
        std = states.std(axis=0)
        return cls(states.mean(axis=0), np.where(std > 0, std, 1.0))

    def standardize(self, states):
        return (np.atleast_2d(np.asarray(states, dtype=float)) - self.mean) / self.std

    def split(self, theta):
        d = self.d_state
        oh = theta[:N_ACTIONS]
        W = theta[N_ACTIONS:].reshape(4, d)  # row 0: state, rows 1-3: state x action code
        return oh, W

    @staticmethod
    def _dot(X, w):
        # elementwise product-sum keeps results independent of BLAS threading
        return (X * w[None, :]).sum(axis=1)

    def q_all(self, theta, Xs):
        """(n, 196) Q-values for standardized states ``Xs``."""
        oh, W = self.split(theta)
        proj = np.stack([self._dot(Xs, W[k]) for k in range(4)], axis=1)  # (n, 4)
        # the action terms are additive over the (vt, peep, fio2) grid
        vt = proj[:, :1] + proj[:, 1:2] * _AXIS_CODES[0][None, :]
        peep = proj[:, 2:3] * _AXIS_CODES[1][None, :]
        fio2 = proj[:, 3:4] * _AXIS_CODES[2][None, :]
        vp = vt[:, :, None] + peep[:, None, :]
        q = np.add(vp[:, :, :, None], fio2[:, None, None, :])
        q += oh.reshape(GRID)[None]
        return q.reshape(len(Xs), N_ACTIONS)

    def q_sa(self, theta, Xs, actions):
        oh, W = self.split(theta)
        codes = ACTION_CODES[actions]
        out = oh[actions] + self._dot(Xs, W[0])
        for k in range(3):
            out = out + codes[:, k] * self._dot(Xs, W[k + 1])
        return out

    def grad_from_weights(self, Xs, actions, weights, probs=None, prob_weight=None):
        """Gradient of sum_i weights_i Q(s_i, a_i) [+ sum_i prob_weight_i sum_a probs_ia Q(s_i, a)].

        ``prob_weight`` is a per-row array or one scalar shared by all rows.
        Both terms are linear in theta, so the gradient is a weighted feature sum.
        """
        d = self.d_state
        g = np.zeros(self.dim)
        g[:N_ACTIONS] = np.bincount(actions, weights=weights, minlength=N_ACTIONS)
        codes = ACTION_CODES[actions]
        coef = np.column_stack([weights, weights[:, None] * codes])  # (n, 4)
        if probs is not None:
            pw = np.broadcast_to(np.asarray(prob_weight, dtype=float), (len(Xs),))
            if np.ndim(prob_weight) == 0:
                g[:N_ACTIONS] += probs.sum(axis=0) * float(prob_weight)
            else:
                g[:N_ACTIONS] += (probs * pw[:, None]).sum(axis=0)
            ec = expected_codes(probs)
            coef = coef + pw[:, None] * np.column_stack([np.ones(len(Xs)), ec])
        G = np.stack([(Xs * coef[:, k:k + 1]).sum(axis=0) for k in range(4)])
        g[N_ACTIONS:] = G.reshape(-1)
        return g

    def design(self, Xs, actions) -> np.ndarray:
        """Explicit (n, dim) design matrix; used for ridge fits and tests."""
        n = len(Xs)
        Phi = np.zeros((n, self.dim))
        Phi[np.arange(n), actions] = 1.0
        codes = ACTION_CODES[actions]
        Phi[:, N_ACTIONS:N_ACTIONS + self.d_state] = Xs
        for k in range(3):
            lo = N_ACTIONS + (k + 1) * self.d_state
            Phi[:, lo:lo + self.d_state] = Xs * codes[:, k:k + 1]
        return Phi

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])
