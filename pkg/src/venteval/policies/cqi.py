"""Q-learning on a growing, depth-capped decision tree.

Each leaf keeps a Q-table over the 196 actions. Training alternates replay
sweeps of the tabular update

    Q(L(s), a) <- (1 - lr) Q(L(s), a) + lr (r + gamma max_a' Q(L(s'), a'))

with a split phase in which every leaf under the depth cap scores candidate
axis-aligned thresholds by the visit-weighted gain in max-Q.  The max over
a' is taken over actions visited in the leaf, so never-seen actions cannot
inflate the targets.
"""

from __future__ import annotations

import numpy as np

from ..mdp import ACTION_BINS, GAMMA, N_ACTIONS, representative_action
from ..schema import STATE_COLUMNS
from .base import Policy

MAX_CANDIDATES = 32


def _leaf_greedy(q, visited):
    """Argmax over visited actions, ties to the lowest index."""
    if len(visited) == 0:
        return int(np.argmax(q))
    v = np.asarray(sorted(visited))
    return int(v[np.argmax(np.asarray(q)[v])])


class CqiTree(Policy):
    """Binary tree; internal nodes test ``s[feature] >= threshold`` (true goes right)."""

    kind = "cqi"

    def __init__(self, nodes, max_depth, feature_names=STATE_COLUMNS, config=None):
        self.nodes = nodes
        self.max_depth = max_depth
        self.feature_names = tuple(feature_names)
        self.config = dict(config or {})

    # -- structure ---------------------------------------------------------

    def is_leaf(self, i) -> bool:
        return self.nodes[i]["feature"] is None

    @property
    def leaves(self) -> list[int]:
        return [i for i in range(len(self.nodes)) if self.is_leaf(i)]

    @property
    def depth(self) -> int:
        return max(n["depth"] for n in self.nodes)

    def leaf_of(self, states) -> np.ndarray:
        X = np.atleast_2d(np.asarray(states, dtype=float))
        node = np.zeros(len(X), dtype=np.int64)
        feat = np.array([-1 if n["feature"] is None else n["feature"] for n in self.nodes])
        thr = np.array([np.nan if n["threshold"] is None else n["threshold"] for n in self.nodes])
        left = np.array([i if n["left"] is None else n["left"] for i, n in enumerate(self.nodes)])
        right = np.array([i if n["right"] is None else n["right"] for i, n in enumerate(self.nodes)])
        for _ in range(self.depth):
            f = feat[node]
            inner = f >= 0
            go_right = np.zeros(len(X), dtype=bool)
            go_right[inner] = X[np.flatnonzero(inner), f[inner]] >= thr[node[inner]]
            node = np.where(inner, np.where(go_right, right[node], left[node]), node)
        return node

    def leaf_action(self, i) -> int:
        n = self.nodes[i]
        if "action" in n:
            return n["action"]
        return _leaf_greedy(n["q"], n["visited"])

    def greedy(self, states) -> np.ndarray:
        table = np.zeros(len(self.nodes), dtype=np.int64)
        for i in self.leaves:
            table[i] = self.leaf_action(i)
        return table[self.leaf_of(states)]

    def q_values(self, states) -> np.ndarray:
        return np.array([self.nodes[l]["q"] for l in self.leaf_of(states)], dtype=float)

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        nodes = []
        for n in self.nodes:
            d = {k: n[k] for k in ("feature", "threshold", "left", "right", "depth")}
            if n["feature"] is None:
                if "q" in n:
                    d["q"] = [float(v) for v in n["q"]]
                    d["visited"] = sorted(int(a) for a in n["visited"])
                    d["n"] = int(n.get("n", 0))
                else:
                    d["action"] = int(n["action"])
            nodes.append(d)
        return {"kind": self.kind, "max_depth": self.max_depth, "feature_names": list(self.feature_names),
                "config": self.config, "nodes": nodes}

    @classmethod
    def from_dict(cls, d):
        nodes = []
        for n in d["nodes"]:
            m = dict(n)
            if "visited" in m:
                m["visited"] = set(m["visited"])
            nodes.append(m)
        return cls(nodes, d["max_depth"], d.get("feature_names", STATE_COLUMNS), d.get("config"))


# -- training ---------------------------------------------------------------


def _max_visited(q, visited):
    return max(q[a] for a in visited) if visited else 0.0


def _midpoints(values):
    u = np.unique(values)
    return (u[:-1] + u[1:]) / 2.0


def _candidates(values, max_candidates=MAX_CANDIDATES):
    """Midpoints between consecutive unique values, thinned to quantile positions."""
    mids = _midpoints(values)
    if len(mids) > max_candidates:
        pick = np.quantile(np.arange(len(mids)), np.linspace(0, 1, max_candidates + 2)[1:-1])
        mids = mids[np.unique(np.round(pick).astype(int))]
    return mids


def _replayed_max(q_parent, member, acts, y, lr):
    """Max-Q after one replay sweep, for many hypothetical children at once.

    ``member`` is (C, m) boolean over the leaf's transitions in sweep order;
    each row is one child.  With fixed targets the sequential update has the
    closed form Q = (1-lr)^k Q0 + sum_j lr (1-lr)^(later_j) y_j, where
    ``later_j`` counts the child's later visits to the same action.
    Returns per-row max over visited actions and the visit counts.
    """
    perm = np.argsort(acts, kind="stable")
    ua, starts = np.unique(acts[perm], return_index=True)
    M = member[:, perm].astype(float)
    # reverse cumsum within each action block
    rc = np.cumsum(M[:, ::-1], axis=1)[:, ::-1]
    ends = np.r_[starts[1:], M.shape[1]]
    tail = np.zeros((M.shape[0], len(starts)))
    has_next = ends < M.shape[1]
    tail[:, has_next] = rc[:, ends[has_next]]
    block = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, M.shape[1]]))
    later = rc - tail[:, block] - M
    w = np.where(M > 0, lr * (1 - lr) ** later, 0.0)
    k = np.add.reduceat(M, starts, axis=1)
    qa = (1 - lr) ** k * q_parent[ua] + np.add.reduceat(w * y[perm], starts, axis=1)
    best = np.where(k > 0, qa, -np.inf).max(axis=1)
    return best, member.sum(axis=1)


def _split_gains(X, feat, thr, acts, y, q_parent, lr, min_leaf, parent_max):
    """Gain of each (feature, threshold) candidate pair; -inf where a child is too small."""
    m = len(X)
    right = X[:, feat].T >= thr[:, None]
    n_r = right.sum(axis=1)
    n_l = m - n_r
    ok = (n_r >= min_leaf) & (n_l >= min_leaf)
    gain = np.full(len(thr), -np.inf)
    if ok.any():
        max_r, _ = _replayed_max(q_parent, right[ok], acts, y, lr)
        max_l, _ = _replayed_max(q_parent, ~right[ok], acts, y, lr)
        gain[ok] = (n_l[ok] * max_l + n_r[ok] * max_r) / m - parent_max
    return gain


def _best_split(X, acts, y, q_parent, lr, min_leaf, max_candidates):
    """Highest-gain (feature, threshold) for one leaf; rows of X in sweep order.

    When a feature's candidate list was thinned, every midpoint between its
    best candidate's two neighbours is scored as well, so a sharp boundary
    that falls between quantile positions is still found.  Ties go to the
    lowest feature, then the coarse candidate.
    """
    m = len(X)
    parent_max = _replayed_max(q_parent, np.ones((1, m), dtype=bool), acts, y, lr)[0][0]
    mids = [_midpoints(X[:, f]) for f in range(X.shape[1])]
    cands = [_candidates(X[:, f], max_candidates) for f in range(X.shape[1])]
    feat = np.concatenate([np.full(len(c), f) for f, c in enumerate(cands)]).astype(np.int64)
    if len(feat) == 0:
        return (-np.inf, None, None)
    thr = np.concatenate(cands)
    gain = _split_gains(X, feat, thr, acts, y, q_parent, lr, min_leaf, parent_max)
    offsets = np.r_[0, np.cumsum([len(c) for c in cands])]
    picks = {}
    lf, lt = [], []
    for f, c in enumerate(cands):
        if len(c) == 0:
            continue
        g = gain[offsets[f]:offsets[f + 1]]
        j = int(np.argmax(g))
        if not np.isfinite(g[j]):
            continue
        picks[f] = (g[j], c[j])
        if len(mids[f]) > len(c):
            lo = c[j - 1] if j > 0 else -np.inf
            hi = c[j + 1] if j + 1 < len(c) else np.inf
            local = mids[f][(mids[f] > lo) & (mids[f] < hi) & (mids[f] != c[j])]
            lf.append(np.full(len(local), f))
            lt.append(local)
    if lf and sum(len(v) for v in lt):
        lf, lt = np.concatenate(lf).astype(np.int64), np.concatenate(lt)
        lg = _split_gains(X, lf, lt, acts, y, q_parent, lr, min_leaf, parent_max)
        for f in np.unique(lf):
            sel = np.flatnonzero(lf == f)
            k = sel[int(np.argmax(lg[sel]))]
            if lg[k] > picks[f][0]:
                picks[f] = (lg[k], lt[k])
    best = (-np.inf, None, None)
    for f in sorted(picks):
        g, t = picks[f]
        if g > best[0]:
            best = (float(g), f, float(t))
    return best


def train_cqi(transitions, max_depth: int = 3, alpha_lr: float = 0.05, gamma: float = GAMMA,
              split_threshold: float = 0.01, passes: int = 20, min_samples_leaf: int = 5, seed: int = 0,
              shuffle: bool = True, max_candidates: int = MAX_CANDIDATES, history: list | None = None) -> CqiTree:
    """Fit a CQI tree.

    Parameters
    ----------
    transitions : TransitionSet
    max_depth : depth cap; 0 keeps a single leaf
    alpha_lr : tabular learning rate in (0, 1)
    split_threshold : minimum max-Q gain for a split
    passes : replay sweeps; splits are considered after every sweep but the last
    shuffle : visit transitions in a seeded random order (fixed across passes)
    history : if given, receives the per-pass sup-norm change of the leaf Q-tables
    """
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    if not 0 < alpha_lr < 1:
        raise ValueError("alpha_lr must lie in (0, 1)")
    if passes < 1:
        raise ValueError("passes must be >= 1")
    S = np.asarray(transitions.states, dtype=float)
    S2 = np.asarray(transitions.next_states, dtype=float)
    A = np.asarray(transitions.actions, dtype=np.int64)
    R = np.asarray(transitions.rewards, dtype=float)
    D = np.asarray(transitions.dones, dtype=float)
    n = len(S)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)

    root = {"feature": None, "threshold": None, "left": None, "right": None, "depth": 0,
            "q": [0.0] * N_ACTIONS, "visited": set(A.tolist()), "n": n}
    tree = CqiTree([root], max_depth, config={
        "max_depth": max_depth, "alpha_lr": alpha_lr, "gamma": gamma, "split_threshold": split_threshold,
        "passes": passes, "min_samples_leaf": min_samples_leaf, "seed": seed, "shuffle": shuffle})

    for p in range(passes):
        leaf_s = tree.leaf_of(S)
        leaf_s2 = tree.leaf_of(S2)
        qs = {i: tree.nodes[i]["q"] for i in tree.leaves}
        before = {i: list(q) for i, q in qs.items()}
        vis = {i: tree.nodes[i]["visited"] for i in tree.leaves}
        cache = {i: _max_visited(qs[i], vis[i]) for i in qs}
        sl, sl2, acts, rew, disc = leaf_s.tolist(), leaf_s2.tolist(), A.tolist(), R.tolist(), (gamma * (1 - D)).tolist()
        for j in order.tolist():
            l, a = sl[j], acts[j]
            q = qs[l]
            target = rew[j] + disc[j] * cache[sl2[j]] if disc[j] else rew[j]
            old = q[a]
            new = (1 - alpha_lr) * old + alpha_lr * target
            q[a] = new
            c = cache[l]
            cache[l] = new if new > c else (_max_visited(q, vis[l]) if old == c else c)
        if history is not None:
            history.append(max(max(abs(x - y) for x, y in zip(qs[i], before[i])) for i in qs))

        if p == passes - 1:
            break
        targets = R + gamma * (1 - D) * np.array([cache[l] for l in sl2])
        new_nodes = []
        for i in tree.leaves:
            node = tree.nodes[i]
            if node["depth"] >= max_depth:
                continue
            rows = order[leaf_s[order] == i]
            if len(rows) < 2 * min_samples_leaf:
                continue
            gain, f, thr = _best_split(S[rows], A[rows], targets[rows], np.asarray(node["q"]), alpha_lr,
                                       min_samples_leaf, max_candidates)
            if f is not None and gain > split_threshold:
                new_nodes.append((i, f, thr, rows))
        for i, f, thr, rows in new_nodes:
            node = tree.nodes[i]
            go_right = S[rows, f] >= thr
            children = []
            for side in (~go_right, go_right):
                children.append(len(tree.nodes))
                tree.nodes.append({"feature": None, "threshold": None, "left": None, "right": None,
                                   "depth": node["depth"] + 1, "q": list(node["q"]),
                                   "visited": set(A[rows[side]].tolist()), "n": int(side.sum())})
            node.update(feature=int(f), threshold=float(thr), left=children[0], right=children[1])
            del node["q"], node["visited"], node["n"]
    return tree


def cqi_act(tree: CqiTree, s):
    from ..mdp import action_from_index
    return action_from_index(int(tree.greedy(np.atleast_2d(s))[0]))


# -- export -----------------------------------------------------------------


def _leaf_label(a):
    vt, peep, fio2 = representative_action(ACTION_BINS[a])
    return f"Vt_set: {vt:g} / PEEP: {peep:g} / FiO2: {fio2:g}"


def export_text(tree: CqiTree) -> str:
    """One line per node, depth-first; parseable by :func:`import_text`."""
    lines = []

    def walk(i):
        n = tree.nodes[i]
        pad = "  " * n["depth"]
        if n["feature"] is None:
            a = tree.leaf_action(i)
            b = ACTION_BINS[a]
            lines.append(f"{pad}node {i} leaf action={b[0]},{b[1]},{b[2]} | {_leaf_label(a)}")
        else:
            name = tree.feature_names[n["feature"]]
            lines.append(f"{pad}node {i} split {name} >= {n['threshold']!r} right={n['right']} left={n['left']}")
            walk(n["left"])
            walk(n["right"])

    walk(0)
    return "\n".join(lines) + "\n"


def export_graph(tree: CqiTree) -> str:
    """Graphviz DOT description; the true (>=) branch is drawn on the right."""
    out = ["digraph cqi {", '  node [shape=box, fontname="Helvetica"];']
    for i, n in enumerate(tree.nodes):
        if n["feature"] is None:
            out.append(f'  n{i} [label="{_leaf_label(tree.leaf_action(i))}", style=rounded];')
        else:
            name = tree.feature_names[n["feature"]]
            out.append(f'  n{i} [label="{name} < {n["threshold"]:.4g}"];')
            out.append(f'  n{i} -> n{n["left"]} [label="yes"];')
            out.append(f'  n{i} -> n{n["right"]} [label="no"];')
    out.append("}")
    return "\n".join(out) + "\n"


def export_tree(tree: CqiTree) -> tuple[str, str]:
    return export_text(tree), export_graph(tree)


def import_text(text: str, feature_names=STATE_COLUMNS) -> CqiTree:
    """Rebuild a decision-only tree (leaf actions, no Q-tables) from :func:`export_text`."""
    from ..mdp import action_index
    names = {f: i for i, f in enumerate(feature_names)}
    nodes = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        depth = (len(line) - len(line.lstrip(" "))) // 2
        tok = line.split()
        i = int(tok[1])
        if tok[2] == "leaf":
            bins = tuple(int(v) for v in tok[3].split("=")[1].split(","))
            nodes[i] = {"feature": None, "threshold": None, "left": None, "right": None, "depth": depth,
                        "action": action_index(bins)}
        else:
            nodes[i] = {"feature": names[tok[3]], "threshold": float(tok[5]), "depth": depth,
                        "right": int(tok[6].split("=")[1]), "left": int(tok[7].split("=")[1])}
    ordered = [nodes[i] for i in range(len(nodes))]
    return CqiTree(ordered, max(n["depth"] for n in ordered), feature_names)
