"""Common policy interface over the 196 discrete ventilator actions."""

from __future__ import annotations

import numpy as np

from ..mdp import N_ACTIONS, action_index


def sample_from(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw, one uniform per row."""
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    return np.minimum((uniforms[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)


class Policy:
    """A policy maps (n, 16) states to action distributions.

    Deterministic policies implement ``greedy``; stochastic ones ``probs``.
    ``act`` consumes one uniform per row so that sampling stays reproducible
    per episode no matter how rows are batched.
    """

    deterministic = True
    kind = "policy"

    def greedy(self, states) -> np.ndarray:
        return np.argmax(self.probs(states), axis=1)

    def probs(self, states) -> np.ndarray:
        a = self.greedy(states)
        out = np.zeros((len(a), N_ACTIONS))
        out[np.arange(len(a)), a] = 1.0
        return out

    def act(self, states, uniforms=None) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if self.deterministic or uniforms is None:
            return self.greedy(states)
        return sample_from(self.probs(states), np.asarray(uniforms, dtype=float))


class FixedPolicy(Policy):
    """Always the same action triple."""

    kind = "fixed"

    def __init__(self, action):
        self.action = tuple(int(v) for v in action)
        self._idx = action_index(self.action)

    def greedy(self, states):
        return np.full(len(np.atleast_2d(states)), self._idx, dtype=np.int64)

    def to_dict(self):
        return {"kind": self.kind, "action": list(self.action)}


class TablePolicy(Policy):
    """Fixed action distribution, independent of the state."""

    kind = "table"
    deterministic = False

    def __init__(self, probs):
        p = np.asarray(probs, dtype=float)
        if p.shape != (N_ACTIONS,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise ValueError("probs must be a distribution over the 196 actions")
        self.p = p

    def probs(self, states):
        return np.tile(self.p, (len(np.atleast_2d(states)), 1))

    def to_dict(self):
        return {"kind": self.kind, "probs": self.p.tolist()}
