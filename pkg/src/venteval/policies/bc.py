"""Behaviour cloning with a random forest over the observed action triplets."""

from __future__ import annotations

import numpy as np
from sklearn.ensemble import RandomForestClassifier

from ..mdp import N_ACTIONS
from .base import Policy, sample_from

DEFAULT_TREES = 100
DEFAULT_DEPTH = 12
BEHAVIOR_FLOOR = 1e-3


class BcPolicy(Policy):
    """Soft-voting forest stored as flat node arrays.

    Split rule matches scikit-learn: features are cast to float32 and
    ``x <= threshold`` goes left.
    """

    kind = "bc"
    deterministic = False

    def __init__(self, trees, classes, floor: float = BEHAVIOR_FLOOR, forest=None):
        self._forest = forest  # fitted sklearn forest, used only to locate leaves faster
        self.trees = [{k: np.asarray(v) for k, v in t.items()} for t in trees]
        self.classes = np.asarray(classes, dtype=np.int64)
        self.floor = floor
        self._pack()

    def _pack(self):
        offsets, feats, thr, left, right, vals = [], [], [], [], [], []
        off = 0
        for t in self.trees:
            n = len(t["feature"])
            offsets.append(off)
            leaf = t["left"] < 0
            feats.append(np.where(leaf, 0, t["feature"]))
            thr.append(t["threshold"])
            left.append(np.where(leaf, np.arange(n), t["left"]) + off)
            right.append(np.where(leaf, np.arange(n), t["right"]) + off)
            v = t["value"].astype(float)
            s = v.sum(axis=1, keepdims=True)
            vals.append(v / np.where(s > 0, s, 1.0))
            off += n
        self._roots = np.array(offsets)
        self._feat = np.concatenate(feats).astype(np.int64)
        self._thr = np.concatenate(thr).astype(float)
        self._left = np.concatenate(left).astype(np.int64)
        self._right = np.concatenate(right).astype(np.int64)
        self._val = np.vstack(vals)
        self._depth = max(int(t["depth"]) for t in self.trees)

    def leaves(self, states) -> np.ndarray:
        """(n_trees, m) global leaf ids."""
        X = np.atleast_2d(np.asarray(states, dtype=float)).astype(np.float32)
        if self._forest is not None:
            return self._forest.apply(X).T + self._roots[:, None]
        X = X.astype(float)
        m = len(X)
        node = np.repeat(self._roots[:, None], m, axis=1)
        rows = np.arange(m)[None, :]
        for _ in range(self._depth):
            go_left = X[rows, self._feat[node]] <= self._thr[node]
            node = np.where(go_left, self._left[node], self._right[node])
        return node

    def class_probs(self, states) -> np.ndarray:
        node = self.leaves(states)
        m = node.shape[1]
        acc = np.zeros((m, len(self.classes)))
        for k in range(len(self.trees)):
            acc += self._val[node[k]]
        return acc / len(self.trees)

    def probs(self, states) -> np.ndarray:
        cp = self.class_probs(states)
        out = np.zeros((len(cp), N_ACTIONS))
        out[:, self.classes] = cp
        return out

    def greedy(self, states) -> np.ndarray:
        return self.classes[np.argmax(self.class_probs(states), axis=1)]

    def act(self, states, uniforms=None) -> np.ndarray:
        # zero-probability columns leave the CDF unchanged, so drawing over
        # the observed classes matches a draw over all 196 actions
        if uniforms is None:
            return self.greedy(states)
        return self.classes[sample_from(self.class_probs(states), np.asarray(uniforms, dtype=float))]

    def behavior_probs(self, states) -> np.ndarray:
        """Probabilities floored at ``floor`` and renormalized, for importance ratios."""
        p = np.maximum(self.probs(states), self.floor)
        return p / p.sum(axis=1, keepdims=True)

    def to_dict(self):
        return {
            "kind": self.kind,
            "classes": self.classes.tolist(),
            "floor": self.floor,
            "trees": [{k: v.tolist() for k, v in t.items()} for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d):
        trees = []
        for t in d["trees"]:
            trees.append({
                "feature": np.array(t["feature"], dtype=np.int64),
                "threshold": np.array(t["threshold"], dtype=float),
                "left": np.array(t["left"], dtype=np.int64),
                "right": np.array(t["right"], dtype=np.int64),
                "value": np.array(t["value"], dtype=float),
                "depth": int(t["depth"]),
            })
        return cls(trees, d["classes"], d.get("floor", BEHAVIOR_FLOOR))


def train_bc(transitions, n_trees: int = DEFAULT_TREES, max_depth: int = DEFAULT_DEPTH, seed: int = 0,
             n_jobs: int = 1, floor: float = BEHAVIOR_FLOOR) -> BcPolicy:
    if len(transitions) == 0:
        raise ValueError("cannot clone a policy from zero transitions")
    X = transitions.states
    y = transitions.actions
    rf = RandomForestClassifier(n_estimators=n_trees, max_depth=max_depth, max_features="sqrt",
                                random_state=seed, n_jobs=n_jobs)
    rf.fit(X, y)
    trees = []
    for est in rf.estimators_:
        tr = est.tree_
        trees.append({
            "feature": tr.feature.astype(np.int64),
            "threshold": tr.threshold.astype(float),
            "left": tr.children_left.astype(np.int64),
            "right": tr.children_right.astype(np.int64),
            "value": tr.value[:, 0, :].astype(float),
            "depth": int(tr.max_depth),
        })
    return BcPolicy(trees, rf.classes_, floor, forest=rf)


def bc_probs(policy: BcPolicy, s) -> np.ndarray:
    return policy.probs(np.atleast_2d(s))[0]
