"""Conservative fitted-Q iteration with a linear Q over a fixed feature map.

Each epoch freezes Bellman targets from the previous iterate and minimizes

    0.5 mean (Q(s,a) - y)^2
    + alpha_cql mean (logsumexp_a' Q(s,a') - Q(s,a))
    + 0.5 l2 ||theta||^2

The logsumexp term is the soft maximum over all 196 actions, so it pulls down
Q at actions absent from the data relative to the logged ones.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from ..mdp import GAMMA
from .base import Policy
from .features import FeatureMap

DEFAULT_ALPHA_CQL = 0.25
DEFAULT_EPOCHS = 30
DEFAULT_L2 = 1e-3
DEFAULT_MAXITER = 100


class DivergenceError(RuntimeError):
    """Raised when the objective turns non-finite; ``checkpoint`` holds the last finite theta."""

    def __init__(self, msg, checkpoint):
        super().__init__(msg)
        self.checkpoint = checkpoint


class ConservativeQ(Policy):
    kind = "cq"

    def __init__(self, fmap: FeatureMap, theta, alpha_cql: float, gamma: float, loss_history=None, config=None):
        self.fmap = fmap
        self.theta = np.asarray(theta, dtype=float)
        self.alpha_cql = alpha_cql
        self.gamma = gamma
        self.loss_history = list(loss_history or [])
        self.config = dict(config or {})

    def q_values(self, states) -> np.ndarray:
        return self.fmap.q_all(self.theta, self.fmap.standardize(states))

    def greedy(self, states) -> np.ndarray:
        return np.argmax(self.q_values(states), axis=1)

    def to_dict(self):
        return {"kind": self.kind, "features": self.fmap.to_dict(), "theta": self.theta.tolist(),
                "alpha_cql": self.alpha_cql, "gamma": self.gamma, "config": self.config,
                "loss_history": [[float(v) for v in ep] for ep in self.loss_history]}

    @classmethod
    def from_dict(cls, d):
        return cls(FeatureMap.from_dict(d["features"]), d["theta"], d["alpha_cql"], d["gamma"],
                   d.get("loss_history"), d.get("config"))


def greedy_action(q: ConservativeQ, s):
    from ..mdp import action_from_index
    return action_from_index(int(q.greedy(np.atleast_2d(s))[0]))


def objective(theta, fmap: FeatureMap, Xs, actions, y, alpha_cql: float, l2: float):
    """Penalized objective and its gradient."""
    n = len(y)
    qsa = fmap.q_sa(theta, Xs, actions)
    resid = qsa - y
    sq = 0.5 * np.mean(resid**2)
    if alpha_cql == 0:
        loss = sq + 0.5 * l2 * float(theta @ theta)
        return loss, fmap.grad_from_weights(Xs, actions, resid / n) + l2 * theta
    q = fmap.q_all(theta, Xs)
    top = q.max(axis=1, keepdims=True)
    e = np.exp(np.subtract(q, top, out=q), out=q)
    mass = e.sum(axis=1, keepdims=True)
    lse = (top + np.log(mass))[:, 0]
    pen = np.mean(lse - qsa)
    loss = sq + alpha_cql * pen + 0.5 * l2 * float(theta @ theta)
    p = np.divide(e, mass, out=e)
    g = fmap.grad_from_weights(Xs, actions, resid / n - alpha_cql / n, probs=p,
                               prob_weight=alpha_cql / n)
    return loss, g + l2 * theta


def squared_objective(theta, fmap: FeatureMap, Xs, actions, y, l2: float):
    """Plain fitted-Q regression objective on the same function class."""
    n = len(y)
    resid = fmap.q_sa(theta, Xs, actions) - y
    loss = 0.5 * np.mean(resid**2) + 0.5 * l2 * float(theta @ theta)
    g = fmap.grad_from_weights(Xs, actions, resid / n)
    return loss, g + l2 * theta


def conservative_gap(theta, fmap: FeatureMap, Xs, actions) -> float:
    """mean [logsumexp_a Q(s,a) - Q(s, a_data)]."""
    return float(np.mean(logsumexp(fmap.q_all(theta, Xs), axis=1) - fmap.q_sa(theta, Xs, actions)))


def _fit(fun, theta0, maxiter):
    history = []
    last = {"theta": theta0.copy()}

    def wrapped(theta):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, g = fun(theta)
        if not (np.isfinite(loss) and np.all(np.isfinite(g))):
            raise DivergenceError("objective became non-finite", last["theta"])
        return loss, g

    def cb(intermediate_result):
        history.append(float(intermediate_result.fun))
        last["theta"] = intermediate_result.x.copy()

    f0, _ = wrapped(theta0)
    history.append(float(f0))
    res = minimize(wrapped, theta0, jac=True, method="L-BFGS-B", callback=cb,
                   options={"maxiter": maxiter, "gtol": 1e-10, "ftol": 1e-14})
    return res.x, history


def _run(transitions, gamma, epochs, maxiter, fun_for_targets, fmap=None):
    S = np.asarray(transitions.states, dtype=float)
    fmap = fmap or FeatureMap.fit(S)
    Xs = fmap.standardize(S)
    Xn = fmap.standardize(transitions.next_states)
    acts = np.asarray(transitions.actions, dtype=np.int64)
    r = np.asarray(transitions.rewards, dtype=float)
    cont = gamma * (1.0 - np.asarray(transitions.dones, dtype=float))
    theta = np.zeros(fmap.dim)
    history = []
    for _ in range(epochs):
        y = r + cont * fmap.q_all(theta, Xn).max(axis=1)
        fun = fun_for_targets(fmap, Xs, acts, y)
        theta, h = _fit(fun, theta, maxiter)
        history.append(h)
    return fmap, theta, history


def train_conservative_q(transitions, alpha_cql: float = DEFAULT_ALPHA_CQL, gamma: float = GAMMA, behavior=None,
                         epochs: int = DEFAULT_EPOCHS, l2: float = DEFAULT_L2, maxiter: int = DEFAULT_MAXITER,
                         seed: int = 0) -> ConservativeQ:
    """Fit conservative Q; ``behavior`` is accepted for interface symmetry and unused.

    The optimizer is deterministic, so ``seed`` only enters the stored config.
    """
    if alpha_cql < 0:
        raise ValueError("alpha_cql must be >= 0")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if len(transitions) == 0:
        raise ValueError("no transitions")

    def make(fmap, Xs, acts, y):
        return lambda th: objective(th, fmap, Xs, acts, y, alpha_cql, l2)

    fmap, theta, history = _run(transitions, gamma, epochs, maxiter, make)
    cfg = {"alpha_cql": alpha_cql, "gamma": gamma, "epochs": epochs, "l2": l2, "maxiter": maxiter, "seed": seed}
    return ConservativeQ(fmap, theta, alpha_cql, gamma, history, cfg)


def train_fqi(transitions, gamma: float = GAMMA, epochs: int = DEFAULT_EPOCHS, l2: float = DEFAULT_L2,
              maxiter: int = DEFAULT_MAXITER) -> ConservativeQ:
    """Plain fitted-Q iteration on the same feature map and optimizer."""

    def make(fmap, Xs, acts, y):
        return lambda th: squared_objective(th, fmap, Xs, acts, y, l2)

    fmap, theta, history = _run(transitions, gamma, epochs, maxiter, make)
    cfg = {"alpha_cql": 0.0, "gamma": gamma, "epochs": epochs, "l2": l2, "maxiter": maxiter}
    return ConservativeQ(fmap, theta, 0.0, gamma, history, cfg)
