"""Logistic mortality model whose score ``z`` proxies the patient's type."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .schema import TYPE_FEATURES

log = logging.getLogger(__name__)

DEFAULT_L2 = 1e-4


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def loss_and_grad(params, X, y, l2):
    """Mean negative log-likelihood plus ``l2/2 * ||w||^2``.

    ``params`` is ``[w..., b]``; the intercept is not penalized.
    """
    w, b = params[:-1], params[-1]
    eta = X @ w + b
    # log(1 + exp(eta)) - y * eta, computed stably
    nll = np.mean(np.logaddexp(0.0, eta) - y * eta)
    loss = nll + 0.5 * l2 * float(w @ w)
    resid = sigmoid(eta) - y
    grad = np.empty_like(params)
    grad[:-1] = X.T @ resid / len(y) + l2 * w
    grad[-1] = resid.mean()
    return loss, grad


def _hessian(params, X, l2):
    eta = X @ params[:-1] + params[-1]
    p = sigmoid(eta)
    v = p * (1 - p) / len(X)
    Xa = np.hstack([X, np.ones((len(X), 1))])
    H = (Xa * v[:, None]).T @ Xa
    H[:-1, :-1] += l2 * np.eye(X.shape[1])
    return H


@dataclass
class LogisticModel:
    weights: np.ndarray
    intercept: float
    mean: np.ndarray
    std: np.ndarray
    l2: float
    feature_names: tuple = TYPE_FEATURES
    n_rows: int = 0
    n_iter: int = 0
    loss_history: list = field(default_factory=list)

    def standardize(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.std

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != len(self.weights):
            raise ValueError(f"expected {len(self.weights)} type features, got {X.shape[1]}")
        if np.any(~np.isfinite(X)):
            raise ValueError("missing or non-finite type feature")
        return sigmoid(self.standardize(X) @ self.weights + self.intercept)

    def to_dict(self):
        return {
            "kind": "logistic",
            "feature_names": list(self.feature_names),
            "weights": self.weights.tolist(),
            "intercept": self.intercept,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "l2": self.l2,
            "n_rows": self.n_rows,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            weights=np.array(d["weights"], dtype=float),
            intercept=float(d["intercept"]),
            mean=np.array(d["mean"], dtype=float),
            std=np.array(d["std"], dtype=float),
            l2=float(d["l2"]),
            feature_names=tuple(d["feature_names"]),
            n_rows=int(d.get("n_rows", 0)),
            n_iter=int(d.get("n_iter", 0)),
        )


def fit_logistic(X, y, l2: float = DEFAULT_L2, tol: float = 1e-8, max_iter: int = 200,
                 feature_names=TYPE_FEATURES) -> LogisticModel:
    """Fit by damped Newton with backtracking until ``||grad|| < tol``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be (n, d) with one label per row")
    if len(y) < 2:
        raise ValueError("need at least two rows")
    if np.any(~np.isfinite(X)):
        bad = np.flatnonzero(~np.isfinite(X).all(axis=0))
        raise ValueError(f"non-finite values in features {[feature_names[i] for i in bad]}")
    if len(np.unique(y)) < 2:
        raise ValueError("both outcome classes must be present")

    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    Xs = (X - mean) / std

    params = np.zeros(X.shape[1] + 1)
    loss, grad = loss_and_grad(params, Xs, y, l2)
    history = [loss]
    it = 0
    while np.linalg.norm(grad) >= tol and it < max_iter:
        H = _hessian(params, Xs, l2)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = params - t * step
            cand_loss, cand_grad = loss_and_grad(cand, Xs, y, l2)
            if cand_loss <= loss - 1e-4 * t * float(grad @ step) or t < 1e-12:
                break
            t *= 0.5
        if cand_loss > loss:
            break
        params, loss, grad = cand, cand_loss, cand_grad
        history.append(loss)
        it += 1
    if np.linalg.norm(grad) >= tol:
        log.warning("logistic fit stopped at gradient norm %.3g", np.linalg.norm(grad))

    return LogisticModel(
        weights=params[:-1].copy(),
        intercept=float(params[-1]),
        mean=mean,
        std=std,
        l2=l2,
        feature_names=tuple(feature_names),
        n_rows=len(y),
        n_iter=it,
        loss_history=history,
    )


def predict_propensity(model: LogisticModel, type_features) -> float:
    return float(model.predict(np.asarray(type_features, dtype=float)[None, :])[0])


def select_l2(X, y, grid=(1e-2, 1e-3, 1e-4, 1e-5), k_folds: int = 5, seed: int = 0) -> tuple[float, dict]:
    """Pick the L2 weight with the lowest cross-validated log-loss."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    folds = np.random.default_rng(seed).permutation(len(y)) % k_folds
    scores = {}
    for l2 in grid:
        losses = []
        for k in range(k_folds):
            tr, te = folds != k, folds == k
            if len(np.unique(y[tr])) < 2:
                continue
            m = fit_logistic(X[tr], y[tr], l2=l2)
            p = np.clip(m.predict(X[te]), 1e-12, 1 - 1e-12)
            losses.append(-np.mean(y[te] * np.log(p) + (1 - y[te]) * np.log(1 - p)))
        scores[l2] = float(np.mean(losses))
    best = min(grid, key=lambda v: scores[v])
    return best, scores
