"""Episode CSV ingestion and the preprocessing pipeline.

Order of operations: truncate to 18 steps, winsorize with training-split
limits, fill gaps of up to five steps, KNN-impute the rest, then drop
episodes whose ventilator settings were more than half imputed.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.impute import KNNImputer

from . import mdp
from .dataset import EpisodeRecord, RawEpisode, TransitionSet
from .schema import (
    BINARY_FIELDS,
    MAX_STEPS,
    STATE_FEATURES,
    STATIC_FIELDS,
    STEP_COLUMNS,
    VENT_SETTINGS,
)

log = logging.getLogger(__name__)

MAX_FILL_GAP = 5
MAX_IMPUTED_FRACTION = 0.5
KNN_NEIGHBORS = 5
WINSOR_PERCENTILES = (0.3, 99.7)
WINSOR_STATIC = ("weight", "age")

# Sepsis-associated ICD-9 codes
SEPSIS_ICD9 = frozenset("""
024 036.3 038.0 038.2 038.3 038.40 038.41 038.42 038.43 038.44 038.49 038.8
038.9 098.89 360.00 519.01 522.4 528.3 567.22 599.0 614.9 630 632 634 635
636 637 638 639 659.3 670.2 670.3 672.00 682.9 771.3 771.81 771.89 785.52 791
995.91 995.92 995.94 996.64 998.02 998.59 999.31 999.39
""".split())


class Excluded(Exception):
    """Raised (or returned) when an episode fails the imputation criterion."""


def normalize_icd9(code: str) -> str:
    """Dotted form of an ICD-9 diagnosis code ('0389' -> '038.9')."""
    code = code.strip().upper()
    if not code or "." in code:
        return code
    head = 4 if code.startswith("E") else 3
    return code if len(code) <= head else f"{code[:head]}.{code[head:]}"


def flag_sepsis(codes) -> bool:
    return any(normalize_icd9(c) in SEPSIS_ICD9 for c in codes)


# -- winsorizing ---------------------------------------------------------


@dataclass
class WinsorLimits:
    low: dict
    high: dict

    def to_dict(self):
        return {"low": self.low, "high": self.high, "percentiles": list(WINSOR_PERCENTILES)}

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d["low"]), dict(d["high"]))


def _winsor_columns():
    return [c for c in STEP_COLUMNS if c not in BINARY_FIELDS]


def fit_winsor(train: list[RawEpisode]) -> WinsorLimits:
    low, high = {}, {}
    stacked = np.vstack([ep.steps for ep in train]) if train else np.empty((0, len(STEP_COLUMNS)))
    for name in _winsor_columns():
        col = stacked[:, STEP_COLUMNS.index(name)]
        low[name], high[name] = _percentile_limits(col, name)
    for name in WINSOR_STATIC:
        col = np.array([ep.static.get(name, np.nan) for ep in train], dtype=float)
        low[name], high[name] = _percentile_limits(col, name)
    return WinsorLimits(low, high)


def _percentile_limits(col, name):
    col = col[~np.isnan(col)]
    if len(col) == 0:
        raise ValueError(f"feature {name!r} is entirely missing in the training split")
    lo, hi = np.percentile(col, WINSOR_PERCENTILES)
    return float(lo), float(hi)


def apply_winsor(ep: RawEpisode, limits: WinsorLimits) -> RawEpisode:
    steps = ep.steps.copy()
    for name in _winsor_columns():
        j = STEP_COLUMNS.index(name)
        steps[:, j] = np.clip(steps[:, j], limits.low[name], limits.high[name])  # NaN passes through
    static = dict(ep.static)
    for name in WINSOR_STATIC:
        v = static.get(name, np.nan)
        if v is not None and not np.isnan(v):
            static[name] = float(np.clip(v, limits.low[name], limits.high[name]))
    return RawEpisode(ep.episode_id, static, steps, ep.icd9_codes)


# -- filling and imputation ----------------------------------------------


def fill_gaps(col: np.ndarray, max_gap: int = MAX_FILL_GAP) -> np.ndarray:
    """Forward/backward fill runs of at most ``max_gap`` missing values.

    Run length is measured on the original column; a run with an observed
    value before it is forward-filled, a leading run is backward-filled.
    Longer runs stay missing.
    """
    out = col.copy()
    miss = np.isnan(col)
    n = len(col)
    i = 0
    while i < n:
        if not miss[i]:
            i += 1
            continue
        j = i
        while j < n and miss[j]:
            j += 1
        if j - i <= max_gap:
            if i > 0:
                out[i:j] = col[i - 1]
            elif j < n:
                out[i:j] = col[j]
        i = j
    return out


class KnnReference:
    """Donor rows for KNN imputation, z-scored with their own statistics."""

    def __init__(self, rows: np.ndarray, k: int = KNN_NEIGHBORS):
        if k <= 0:
            raise ValueError("k must be positive")
        rows = np.asarray(rows, dtype=float)
        self.k = k
        self.n_rows = len(rows)
        if self.n_rows == 0:
            self._imputer = None
            return
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-missing donor columns
            self.mean = np.nanmean(rows, axis=0)
            std = np.nanstd(rows, axis=0)
        self.std = np.where((std > 0) & np.isfinite(std), std, 1.0)
        self.mean = np.where(np.isfinite(self.mean), self.mean, 0.0)
        self._imputer = KNNImputer(n_neighbors=k, keep_empty_features=True)
        self._imputer.fit((rows - self.mean) / self.std)

    def impute(self, rows: np.ndarray) -> np.ndarray:
        if not np.isnan(rows).any():
            return rows
        if self._imputer is None:
            raise ValueError("residual missing values but the KNN reference set is empty")
        filled = self._imputer.transform((rows - self.mean) / self.std) * self.std + self.mean
        return np.where(np.isnan(rows), filled, rows)


def _knn_rows(steps, static):
    ctx = np.array([[static.get("weight", np.nan), static.get("age", np.nan)]] * len(steps), dtype=float)
    return np.hstack([steps, ctx])


def build_reference(episodes: list[RawEpisode], k: int = KNN_NEIGHBORS) -> KnnReference:
    """Reference set from gap-filled steps of (winsorized) training episodes."""
    blocks = []
    for ep in episodes:
        filled = np.column_stack([fill_gaps(ep.steps[:, j]) for j in range(ep.steps.shape[1])])
        blocks.append(_knn_rows(filled, ep.static))
    rows = np.vstack(blocks) if blocks else np.empty((0, len(STEP_COLUMNS) + 2))
    return KnnReference(rows, k)


def impute_episode(ep: RawEpisode, reference: KnnReference, k: int | None = None,
                   static_defaults: dict | None = None):
    """Fill and impute one winsorized episode.

    Returns an EpisodeRecord, or an ``Excluded`` instance when any ventilator
    setting needed imputation at more than half of the steps.
    """
    if k is not None and k <= 0:
        raise ValueError("k must be positive")
    steps = ep.steps[:MAX_STEPS]
    T = len(steps)
    filled = np.column_stack([fill_gaps(steps[:, j]) for j in range(steps.shape[1])]) if T else steps
    static = dict(ep.static)
    for name in ("weight", "age"):
        if static.get(name) is None or np.isnan(static.get(name, np.nan)):
            if static_defaults is None or name not in static_defaults:
                raise ValueError(f"episode {ep.episode_id}: missing {name}")
            static[name] = static_defaults[name]
    rows = _knn_rows(filled, static)
    if np.isnan(rows).any():
        rows = reference.impute(rows)
    out = rows[:, : len(STEP_COLUMNS)]
    fractions = {}
    for name in VENT_SETTINGS:
        j = STEP_COLUMNS.index(name)
        fractions[name] = float(np.isnan(steps[:, j]).sum() / T) if T else 0.0
    worst = max(fractions, key=fractions.get) if fractions else None
    if worst is not None and fractions[worst] > MAX_IMPUTED_FRACTION:
        return Excluded(f"episode {ep.episode_id}: {worst} imputed at {fractions[worst]:.0%} of steps")
    if ep.icd9_codes:
        static["sepsis"] = float(flag_sepsis(ep.icd9_codes))
    for name in STATIC_FIELDS:
        if name not in static or static[name] is None or np.isnan(float(static[name])):
            raise ValueError(f"episode {ep.episode_id}: static field {name!r} missing")
        static[name] = float(static[name])
    return EpisodeRecord(ep.episode_id, static, out, fractions)


def preprocess(train: list[RawEpisode], test: list[RawEpisode] | None = None, k: int = KNN_NEIGHBORS):
    """Run the full pipeline; winsor limits and donors come from ``train``.

    Returns ``(train_records, test_records, limits, report)``; the report
    lists excluded episode ids with the reason.
    """
    test = test or []
    train = [_truncate(ep) for ep in train]
    test = [_truncate(ep) for ep in test]
    # exclusion depends only on raw missingness, so limits can skip excluded episodes
    kept = [ep for ep in train if _setting_missing_fraction(ep) <= MAX_IMPUTED_FRACTION]
    limits = fit_winsor(kept or train)
    train_w = [apply_winsor(ep, limits) for ep in train]
    test_w = [apply_winsor(ep, limits) for ep in test]
    reference = build_reference(train_w, k)
    defaults = {n: float(np.nanmedian([ep.static.get(n, np.nan) for ep in train_w])) for n in ("weight", "age")}
    report = {"excluded": [], "too_short": [], "n_input": len(train) + len(test)}
    results = []
    for split in (train_w, test_w):
        kept = []
        for ep in split:
            rec = impute_episode(ep, reference, k, defaults)
            if isinstance(rec, Excluded):
                report["excluded"].append({"episode_id": ep.episode_id, "reason": str(rec)})
            elif rec.length < 2:
                report["too_short"].append(ep.episode_id)
            else:
                kept.append(rec)
        results.append(kept)
    return results[0], results[1], limits, report


def _setting_missing_fraction(ep: RawEpisode) -> float:
    if ep.length == 0:
        return 0.0
    cols = [STEP_COLUMNS.index(name) for name in VENT_SETTINGS]
    return float(np.isnan(ep.steps[:, cols]).sum(axis=0).max() / ep.length)


def _truncate(ep: RawEpisode) -> RawEpisode:
    if ep.length <= MAX_STEPS:
        return ep
    return RawEpisode(ep.episode_id, ep.static, ep.steps[:MAX_STEPS], ep.icd9_codes)


# -- transitions ---------------------------------------------------------


def episode_states(ep: EpisodeRecord, z: float) -> np.ndarray:
    """(T, 16) state matrix: observable features then the episode's z."""
    cols = []
    for f in STATE_FEATURES:
        if f in STEP_COLUMNS:
            cols.append(ep.column(f))
        else:
            cols.append(np.full(ep.length, float(ep.static[f])))
    cols.append(np.full(ep.length, z))
    return np.column_stack(cols)


def build_transitions(episodes: list[EpisodeRecord], reward_params: mdp.RewardParams,
                      propensity=None) -> TransitionSet:
    """T-1 transitions per episode, z fixed from the first step."""
    parts = []
    for ep in episodes:
        if ep.length < 2:
            log.warning("episode %s has fewer than 2 steps; skipped", ep.episode_id)
            continue
        z = float(propensity.predict(ep.type_features(0)[None, :])[0]) if propensity is not None else 0.0
        S = episode_states(ep, z)
        bins = ep.action_bins()
        n = ep.length - 1
        parts.append((np.full(n, ep.episode_id, dtype=object), np.arange(1, n + 1), S[:-1], bins[:-1], S[1:],
                      np.arange(1, n + 1) == n))
    if not parts:
        raise ValueError("no episode with at least two steps")
    eid, t, s, b, sn, d = (np.concatenate(c) for c in zip(*parts))
    ts = TransitionSet(eid, t, s, b, np.zeros(len(t)), sn, d)
    return ts.with_rewards(reward_params)


# -- CSV I/O -------------------------------------------------------------

STEP_HEADER = ("episode_id", "step_index") + STEP_COLUMNS
STATIC_HEADER = ("episode_id",) + STATIC_FIELDS + ("icd9_codes",)


def read_episodes(steps_path, static_path) -> list[RawEpisode]:
    steps = pd.read_csv(steps_path, dtype={"episode_id": str}, float_precision="round_trip")
    static = pd.read_csv(static_path, dtype={"episode_id": str, "icd9_codes": str}, float_precision="round_trip")
    missing = [c for c in STEP_HEADER if c not in steps.columns]
    if missing:
        raise ValueError(f"episode file lacks columns {missing}")
    missing = [c for c in ("episode_id",) + STATIC_FIELDS if c not in static.columns and c != "sepsis"]
    if missing:
        raise ValueError(f"static file lacks columns {missing}")
    static = static.set_index("episode_id")
    out = []
    for eid, grp in steps.groupby("episode_id", sort=True):
        grp = grp.sort_values("step_index")
        idx = grp["step_index"].to_numpy()
        if len(np.unique(idx)) != len(idx):
            raise ValueError(f"episode {eid}: duplicate step_index")
        if eid not in static.index:
            raise ValueError(f"episode {eid}: no static row")
        row = static.loc[eid]
        st = {}
        for name in STATIC_FIELDS:
            v = row.get(name, np.nan)
            st[name] = float(v) if v is not None and not pd.isna(v) else np.nan
        codes = row.get("icd9_codes", np.nan)
        codes = tuple(c for c in str(codes).split(";") if c) if isinstance(codes, str) else ()
        out.append(RawEpisode(str(eid), st, grp[list(STEP_COLUMNS)].to_numpy(dtype=float), codes))
    return out


def episodes_to_frames(episodes, simulated: bool | None = None):
    """Steps and static DataFrames in the on-disk schema."""
    step_rows, static_rows = [], []
    for ep in episodes:
        block = pd.DataFrame(ep.steps, columns=list(STEP_COLUMNS))
        block.insert(0, "step_index", np.arange(1, ep.length + 1))
        block.insert(0, "episode_id", ep.episode_id)
        step_rows.append(block)
        st = {"episode_id": ep.episode_id, **{k: ep.static.get(k, np.nan) for k in STATIC_FIELDS}}
        st["icd9_codes"] = ";".join(getattr(ep, "icd9_codes", ()) or ())
        static_rows.append(st)
    steps = pd.concat(step_rows, ignore_index=True) if step_rows else pd.DataFrame(columns=STEP_HEADER)
    if simulated is not None:
        steps["simulated"] = simulated
    return steps, pd.DataFrame(static_rows, columns=list(STATIC_HEADER))


def write_episodes(episodes, steps_path, static_path):
    steps, static = episodes_to_frames(episodes)
    steps.to_csv(steps_path, index=False, float_format="%.17g")
    static.to_csv(static_path, index=False, float_format="%.17g")


def records_from_raw(raw: list[RawEpisode]) -> list[EpisodeRecord]:
    """Wrap fully observed raw episodes without any preprocessing."""
    out = []
    for ep in raw:
        if np.isnan(ep.steps).any():
            raise ValueError(f"episode {ep.episode_id} has missing values; run preprocess first")
        static = {k: float(v) for k, v in ep.static.items()}
        out.append(EpisodeRecord(ep.episode_id, static, ep.steps, {s: 0.0 for s in VENT_SETTINGS}))
    return out


TRANSITION_HEADER = (
    ("episode_id", "t")
    + tuple(f"s_{c}" for c in STATE_FEATURES + ("z",))
    + ("a_vt", "a_peep", "a_fio2", "reward")
    + tuple(f"next_{c}" for c in STATE_FEATURES + ("z",))
    + ("done",)
)


def transitions_to_frame(ts: TransitionSet) -> pd.DataFrame:
    data = np.column_stack([ts.states, ts.bins, ts.rewards, ts.next_states])
    cols = list(TRANSITION_HEADER[2:-1])
    df = pd.DataFrame(data, columns=cols)
    for c in ("a_vt", "a_peep", "a_fio2"):
        df[c] = df[c].astype(int)
    df.insert(0, "t", ts.t.astype(int))
    df.insert(0, "episode_id", ts.episode_id)
    df["done"] = ts.dones.astype(int)
    return df


def transitions_from_frame(df: pd.DataFrame) -> TransitionSet:
    s_cols = [f"s_{c}" for c in STATE_FEATURES + ("z",)]
    n_cols = [f"next_{c}" for c in STATE_FEATURES + ("z",)]
    return TransitionSet(
        episode_id=df["episode_id"].astype(str).to_numpy(dtype=object),
        t=df["t"].to_numpy(dtype=int),
        states=df[s_cols].to_numpy(dtype=float),
        bins=df[["a_vt", "a_peep", "a_fio2"]].to_numpy(dtype=int),
        rewards=df["reward"].to_numpy(dtype=float),
        next_states=df[n_cols].to_numpy(dtype=float),
        dones=df["done"].to_numpy(dtype=int).astype(bool),
    )
