"""Grouped-bandwidth Nadaraya-Watson transition model.

The next state is a kernel-weighted average of the next states of matched
historical transitions.  Each match weight is a product of Epanechnikov
kernels, one per state feature group, one for the action and one for the
propensity score, so a transition beyond any single bandwidth gets zero
weight.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import TransitionSet
from .schema import (
    DYNAMIC_FEATURES,
    FEATURE_GROUPS,
    GROUP_ORDER,
    SPO2_DYN_IDX,
    STATE_FEATURES,
    Z_IDX,
)

log = logging.getLogger(__name__)

EPS_MASS = 1e-10
_CHUNK_ELEMS = 1_000_000
_PRUNE_ORDER = (2, 3, 1, 0)  # tightest groups first


def epanechnikov(u):
    u = np.asarray(u, dtype=float)
    return np.maximum(0.0, 0.75 * (1.0 - u * u))


@dataclass(frozen=True)
class BandwidthSet:
    h_s_hemo: float
    h_s_resp: float
    h_s_blood: float
    h_s_misc: float
    h_a: float
    h_z: float
    lam: float = 1e-3

    def __post_init__(self):
        for name in ("h_s_hemo", "h_s_resp", "h_s_blood", "h_s_misc", "h_a", "h_z"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"bandwidth {name} must be positive, got {v}")
        if not (self.lam >= 0):
            raise ValueError("lambda must be non-negative")

    @property
    def state(self) -> tuple:
        """State bandwidths in GROUP_ORDER (hemodynamic, respiratory, blood gas, misc)."""
        return (self.h_s_hemo, self.h_s_resp, self.h_s_blood, self.h_s_misc)

    @classmethod
    def parse(cls, text: str, lam: float = 1e-3) -> "BandwidthSet":
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 6:
            raise ValueError("expected six comma-separated bandwidths h_sh,h_sr,h_sb,h_sm,h_a,h_z")
        return cls(*vals, lam=lam)

    def to_dict(self):
        return asdict(self)


# bandwidths selected by cross-validation on ICU data; default for real cohorts
CLINICAL_BANDWIDTHS = BandwidthSet(3.036, 2.8, 2.532, 2.032, 1.0, 1.5, 1e-3)

DEFAULT_GRID = {
    "h_s_hemo": (2.036, 2.536, 3.036),
    "h_s_resp": (1.8, 2.3, 2.8),
    "h_s_blood": (1.532, 2.032, 2.532),
    "h_s_misc": (1.532, 2.032, 2.532),
    "h_a": (1.0, 1.5, 2.0),
    "h_z": (0.5, 1.0, 1.5, 2.0),
    "lam": (1e-2, 1e-3, 1e-4),
}
_GRID_KEYS = ("h_s_hemo", "h_s_resp", "h_s_blood", "h_s_misc", "h_a", "h_z", "lam")


def grid_points(grid: dict) -> list[BandwidthSet]:
    missing = [k for k in _GRID_KEYS if k not in grid]
    if missing:
        raise ValueError(f"grid is missing {missing}")
    return [BandwidthSet(*vals) for vals in itertools.product(*(grid[k] for k in _GRID_KEYS))]


def group_indices(groups: dict | None = None) -> tuple:
    groups = FEATURE_GROUPS if groups is None else groups
    seen = [f for g in GROUP_ORDER for f in groups[g]]
    if sorted(seen) != sorted(STATE_FEATURES):
        raise ValueError("feature groups must partition the observable features")
    return tuple(np.array([STATE_FEATURES.index(f) for f in groups[g]]) for g in GROUP_ORDER)


def _stats(x):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    # spreads at rounding level count as constant columns
    std = np.where(std > 1e-9 * (1.0 + np.abs(mean)), std, 1.0)
    return mean, std


class _PairTable:
    """In-support (query, train) pairs with per-kernel distances.

    Pairs are in row-major order (query, then training index), so per-query
    reductions see the same summation order however queries are batched.
    """

    def __init__(self, rows, cols, dists):
        self.rows = rows
        self.cols = cols
        self.dists = dists  # list of 6 arrays: hemo, resp, blood, misc, action, z


class NweModel:
    """Memory-based transition model; immutable after construction."""

    def __init__(self, states, bins, targets, bandwidths: BandwidthSet, groups=None, episode_id=None):
        # C order fixes the reduction order of the standardization statistics
        states = np.ascontiguousarray(states, dtype=float)
        bins = np.ascontiguousarray(bins, dtype=float)
        targets = np.ascontiguousarray(targets, dtype=float)
        if len(states) == 0:
            raise ValueError("cannot fit a transition model on zero transitions")
        if targets.shape[1] != len(DYNAMIC_FEATURES):
            raise ValueError(f"targets must have {len(DYNAMIC_FEATURES)} columns")
        self.raw_states = states
        self.raw_bins = bins
        self.raw_targets = targets
        self.episode_id = None if episode_id is None else np.asarray(episode_id)
        self.bandwidths = bandwidths
        self.groups = dict(FEATURE_GROUPS if groups is None else groups)
        self._group_idx = group_indices(self.groups)

        obs = states[:, : len(STATE_FEATURES)]
        self.x_mean, self.x_std = _stats(obs)
        self.z_mean, self.z_std = _stats(states[:, Z_IDX])
        self.y_mean, self.y_std = _stats(targets)
        self.x = (obs - self.x_mean) / self.x_std
        self.zs = (states[:, Z_IDX] - self.z_mean) / self.z_std
        self.y = (targets - self.y_mean) / self.y_std
        self._uniq_bins, code = np.unique(bins, axis=0, return_inverse=True)
        self._bin_code = code.reshape(-1)
        self._cand_cache = {}
        self._res = np.zeros_like(targets)
        self._res_done = np.zeros(len(targets), dtype=bool)

    @property
    def n_samples(self) -> int:
        return len(self.x)

    def with_bandwidths(self, bandwidths: BandwidthSet) -> "NweModel":
        return NweModel(self.raw_states, self.raw_bins, self.raw_targets, bandwidths, self.groups, self.episode_id)

    # -- kernel evaluation -------------------------------------------------

    def _standardize_query(self, states):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if np.any(~np.isfinite(states)):
            raise ValueError("non-finite query state")
        xq = (states[:, : len(STATE_FEATURES)] - self.x_mean) / self.x_std
        zq = (states[:, Z_IDX] - self.z_mean) / self.z_std
        return xq, zq

    def _action_candidates(self, a_row, ha):
        """Training rows whose action lies within ``ha`` of ``a_row``, with distances."""
        key = (tuple(int(v) for v in a_row), float(ha))
        hit = self._cand_cache.get(key)
        if hit is None:
            d = np.sqrt(((self._uniq_bins - np.asarray(key[0], dtype=float)) ** 2).sum(axis=1))
            ok = np.flatnonzero(d < ha)
            rows = np.flatnonzero(np.isin(self._bin_code, ok))
            hit = (rows, d[self._bin_code[rows]])
            self._cand_cache[key] = hit
        return hit

    def _pairs(self, xq, aq, zq, limits, exclude=None) -> _PairTable:
        """Pairs whose scaled distance is below 1 for every kernel.

        Queries are grouped by action, since the action kernel only depends on
        the pair of bin triples.  ``limits`` holds the six bandwidths (state
        groups, action, z) used to prune; ``exclude`` gives, per query, a
        training index to drop.
        """
        hs, ha, hz = limits[:4], limits[4], limits[5]
        rows_all, cols_all, dist_all = [], [], [[] for _ in range(6)]
        uniq_q, inv_q = np.unique(aq, axis=0, return_inverse=True)
        inv_q = inv_q.reshape(-1)
        for g_i, a_row in enumerate(uniq_q):
            qrows = np.flatnonzero(inv_q == g_i)
            cand, cand_da = self._action_candidates(a_row, ha)
            if len(cand) == 0:
                continue
            step = max(1, _CHUNK_ELEMS // len(cand))
            zc = self.zs[cand]
            g0 = _PRUNE_ORDER[0]
            xc0 = self.x[cand][:, self._group_idx[g0]]
            for lo in range(0, len(qrows), step):
                qr = qrows[lo:lo + step]
                # the first group is evaluated densely; later ones only on survivors
                d0 = np.zeros((len(qr), len(cand)))
                for j, f in enumerate(self._group_idx[g0]):
                    d0 += (xq[qr, f][:, None] - xc0[None, :, j]) ** 2
                d0 = np.sqrt(d0)
                mask = (np.abs(zq[qr, None] - zc[None, :]) < hz) & (d0 < hs[g0])
                if exclude is not None:
                    pos = np.searchsorted(cand, exclude[qr])
                    hitpos = (pos < len(cand)) & (cand[np.minimum(pos, len(cand) - 1)] == exclude[qr])
                    mask[np.flatnonzero(hitpos), pos[hitpos]] = False
                r, c = np.nonzero(mask)
                rq, ct = qr[r], cand[c]
                d_a = cand_da[c]
                d_z = np.abs(zq[rq] - self.zs[ct])
                group_d = [None] * 4
                group_d[g0] = d0[r, c]
                for g in _PRUNE_ORDER[1:]:
                    d2 = np.zeros(len(rq))
                    for f in self._group_idx[g]:
                        d2 += (xq[rq, f] - self.x[ct, f]) ** 2
                    d = np.sqrt(d2)
                    keep = d < hs[g]
                    rq, ct, d = rq[keep], ct[keep], d[keep]
                    d_a, d_z = d_a[keep], d_z[keep]
                    for k in range(4):
                        if group_d[k] is not None:
                            group_d[k] = group_d[k][keep]
                    group_d[g] = d
                rows_all.append(rq)
                cols_all.append(ct)
                for k, arr in enumerate(group_d + [d_a, d_z]):
                    dist_all[k].append(arr)
        if not rows_all:
            empty = np.empty(0)
            return _PairTable(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), [empty] * 6)
        rows = np.concatenate(rows_all)
        order = np.argsort(rows, kind="stable")  # row-major; columns already ascending within a row
        return _PairTable(rows[order], np.concatenate(cols_all)[order],
                          [np.concatenate(d)[order] for d in dist_all])

    @staticmethod
    def _weights(pairs: _PairTable, bw: BandwidthSet) -> np.ndarray:
        h = bw.state + (bw.h_a, bw.h_z)
        w = epanechnikov(pairs.dists[0] / h[0])
        for k in range(1, 6):
            w = w * epanechnikov(pairs.dists[k] / h[k])
        return w

    def _nearest(self, xq_row, aq_row, zq_val, exclude=None) -> int:
        total = np.zeros(self.n_samples)
        for idx in self._group_idx:
            total += np.sqrt(((self.x[:, idx] - xq_row[idx]) ** 2).sum(axis=1))
        total += np.sqrt(((self.raw_bins - aq_row) ** 2).sum(axis=1))
        total += np.abs(self.zs - zq_val)
        if exclude is not None:
            total[exclude] = np.inf
        return int(np.argmin(total))

    def _predict_std(self, xq, aq, zq, exclude=None):
        bw = self.bandwidths
        pairs = self._pairs(xq, aq, zq, bw.state + (bw.h_a, bw.h_z), exclude=exclude)
        w = self._weights(pairs, bw)
        m = len(xq)
        mass = np.bincount(pairs.rows, weights=w, minlength=m)
        count = np.bincount(pairs.rows, minlength=m)
        pred = np.empty((m, self.y.shape[1]))
        for j in range(self.y.shape[1]):
            pred[:, j] = np.bincount(pairs.rows, weights=w * self.y[pairs.cols, j], minlength=m)
        denom = (mass + bw.lam)[:, None]
        pred = np.divide(pred, denom, out=np.zeros_like(pred), where=denom > 0)
        fallback = mass < EPS_MASS
        for i in np.flatnonzero(fallback):
            ex = None if exclude is None else exclude[i]
            pred[i] = self.y[self._nearest(xq[i], aq[i], zq[i], ex)]
        return pred, mass, count, fallback, pairs, w

    def predict(self, states, bins, clamp: bool = True, noise_uniforms=None):
        """Predict the 12 dynamic next-state features for each query row.

        Parameters
        ----------
        states : (m, 16) raw state vectors, z in the last column
        bins : (m, 3) action bin indices
        clamp : clip predicted SpO2 into [0, 100]
        noise_uniforms : optional (m,) uniforms in [0, 1); when given, each
            prediction adds the leave-one-out residual of a neighbour drawn
            with probability proportional to its kernel weight.

        Returns
        -------
        pred : (m, 12) array
        diag : dict with ``neighbors``, ``mass`` and ``fallback`` arrays
        """
        xq, zq = self._standardize_query(states)
        aq = np.atleast_2d(np.asarray(bins, dtype=float))
        if aq.shape != (len(xq), 3):
            raise ValueError("bins must be (m, 3)")
        pred_std, mass, count, fallback, pairs, w = self._predict_std(xq, aq, zq)
        pred = pred_std * self.y_std + self.y_mean
        if noise_uniforms is not None:
            pred = pred + self._draw_residuals(np.asarray(noise_uniforms, dtype=float), pairs, w, fallback,
                                               xq, aq, zq)
        if clamp:
            pred[:, SPO2_DYN_IDX] = np.clip(pred[:, SPO2_DYN_IDX], 0.0, 100.0)
        return pred, {"neighbors": count, "mass": mass, "fallback": fallback}

    # -- residual bootstrap ------------------------------------------------

    def residuals(self, idx=None) -> np.ndarray:
        """Leave-one-out residuals of training targets (raw units), computed on demand."""
        n = self.n_samples
        idx = np.arange(n) if idx is None else np.asarray(idx, dtype=np.int64)
        todo = np.unique(idx[~self._res_done[idx]])
        step = max(1, _CHUNK_ELEMS // n)
        for lo in range(0, len(todo), step):
            ix = todo[lo:lo + step]
            pred_std, _, _, fallback, _, _ = self._predict_std(self.x[ix], self.raw_bins[ix], self.zs[ix],
                                                               exclude=ix)
            r = self.raw_targets[ix] - (pred_std * self.y_std + self.y_mean)
            r[fallback] = 0.0
            self._res[ix] = r
            self._res_done[ix] = True
        return self._res[idx]

    def _draw_residuals(self, u, pairs, w, fallback, xq, aq, zq):
        m = len(u)
        pick = np.zeros(m, dtype=np.int64)
        starts = np.searchsorted(pairs.rows, np.arange(m), side="left")
        ends = np.searchsorted(pairs.rows, np.arange(m), side="right")
        for i in range(m):
            if fallback[i]:
                pick[i] = self._nearest(xq[i], aq[i], zq[i])
                continue
            wi = w[starts[i]:ends[i]]
            cdf = np.cumsum(wi)
            k = min(int(np.searchsorted(cdf, u[i] * cdf[-1], side="right")), len(wi) - 1)
            pick[i] = pairs.cols[starts[i] + k]
        return self.residuals(pick)

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        return {
            "kind": "nwe",
            "bandwidths": self.bandwidths.to_dict(),
            "groups": {g: list(v) for g, v in self.groups.items()},
            "fallback": "nearest_neighbor",
            "eps_mass": EPS_MASS,
            "n_samples": self.n_samples,
            "states": self.raw_states.tolist(),
            "bins": self.raw_bins.astype(int).tolist(),
            "targets": self.raw_targets.tolist(),
            "episode_id": None if self.episode_id is None else [str(e) for e in self.episode_id],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.array(d["states"], dtype=float),
            np.array(d["bins"], dtype=float),
            np.array(d["targets"], dtype=float),
            BandwidthSet(**d["bandwidths"]),
            groups={g: tuple(v) for g, v in d["groups"].items()},
            episode_id=d.get("episode_id"),
        )


def fit_nwe(transitions: TransitionSet, bw: BandwidthSet = CLINICAL_BANDWIDTHS, groups=None) -> NweModel:
    if len(transitions) == 0:
        raise ValueError("cannot fit a transition model on zero transitions")
    return NweModel(transitions.states, transitions.bins, transitions.targets, bw, groups,
                    episode_id=transitions.episode_id)


def predict_next_state(model: NweModel, s, a, z=None, clamp: bool = True):
    """Single-query convenience wrapper; ``s`` may omit z when ``z`` is given."""
    s = np.asarray(s, dtype=float)
    if z is not None:
        s = np.append(s[: len(STATE_FEATURES)], z)
    pred, diag = model.predict(s[None, :], np.asarray(a, dtype=float)[None, :], clamp=clamp)
    return pred[0], {k: v[0] for k, v in diag.items()}


def episode_folds(episode_id, k_folds: int, seed: int) -> np.ndarray:
    """Fold label per transition; every episode lands in exactly one fold."""
    uniq = np.unique(np.asarray(episode_id))
    perm = np.random.default_rng(seed).permutation(len(uniq))
    fold_of = {e: int(perm[i] % k_folds) for i, e in enumerate(uniq)}
    return np.array([fold_of[e] for e in episode_id])


def select_bandwidths(transitions: TransitionSet, grid: dict | None = None, k_folds: int = 5, seed: int = 0,
                      groups=None, penalty: float = float("inf")):
    """Grid search minimizing episode-wise cross-validated SpO2 MAE.

    Returns the selected BandwidthSet and a report with one row per grid
    point (mean and per-fold errors, fallback fraction).
    """
    grid = DEFAULT_GRID if grid is None else grid
    points = grid_points(grid)
    if not points:
        raise ValueError("bandwidth grid is empty")
    if k_folds < 2:
        raise ValueError("k_folds must be at least 2")
    folds = episode_folds(transitions.episode_id, k_folds, seed)
    if len(np.unique(folds)) < k_folds:
        raise ValueError("fewer episodes than folds")

    limits = tuple(max(p.state[g] for p in points) for g in range(4)) + (
        max(p.h_a for p in points), max(p.h_z for p in points))
    errors = np.zeros((len(points), k_folds))
    fallback_frac = np.zeros((len(points), k_folds))
    for k in range(k_folds):
        tr, te = folds != k, folds == k
        model = fit_nwe(transitions.subset(tr), points[0], groups)
        test = transitions.subset(te)
        xq, zq = model._standardize_query(test.states)
        aq = test.bins.astype(float)
        truth = test.targets[:, SPO2_DYN_IDX]
        pairs = model._pairs(xq, aq, zq, limits)
        nn = np.array([model._nearest(xq[i], aq[i], zq[i]) for i in range(len(xq))])
        nn_pred = model.raw_targets[nn, SPO2_DYN_IDX]
        y_spo2 = model.y[pairs.cols, SPO2_DYN_IDX]
        m = len(xq)
        for p_i, bw in enumerate(points):
            w = model._weights(pairs, bw)
            mass = np.bincount(pairs.rows, weights=w, minlength=m)
            num = np.bincount(pairs.rows, weights=w * y_spo2, minlength=m)
            denom = mass + bw.lam
            pred = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
            pred = pred * model.y_std[SPO2_DYN_IDX] + model.y_mean[SPO2_DYN_IDX]
            fb = mass < EPS_MASS
            pred[fb] = nn_pred[fb]
            pred = np.clip(pred, 0.0, 100.0)
            fallback_frac[p_i, k] = fb.mean()
            if fb.all():
                log.debug("grid point %s falls back on every query of fold %d", bw, k)
                errors[p_i, k] = penalty
            else:
                errors[p_i, k] = np.mean(np.abs(pred - truth))
    mean_err = errors.mean(axis=1)
    best = int(np.argmin(mean_err))
    n_pen = int((errors == penalty).any(axis=1).sum())
    if n_pen:
        log.warning("every query of some fold falls back for %d of %d grid points; scored %g", n_pen,
                    len(points), penalty)
    report = [
        {**p.to_dict(), "cv_mae_spo2": float(mean_err[i]), "fold_mae": errors[i].tolist(),
         "fallback_fraction": float(fallback_frac[i].mean())}
        for i, p in enumerate(points)
    ]
    return points[best], report
