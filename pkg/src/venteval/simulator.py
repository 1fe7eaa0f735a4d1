"""Counterfactual rollouts of a policy through the kernel transition model.

All episodes of a batch advance in lockstep, one model query per step.  Each
episode owns a random stream seeded from (seed, episode id), so a trajectory
does not depend on which other episodes share its batch, on batch order, or
on how the batch is split across threads.
"""

from __future__ import annotations

import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import mdp
from .schema import DYNAMIC_IDX, MAX_STEPS, SPO2_IDX, STATE_COLUMNS, STATE_FEATURES

log = logging.getLogger(__name__)


@dataclass
class Trajectory:
    episode_id: str
    states: np.ndarray  # (T, 16)
    bins: np.ndarray  # (T-1, 3)
    rewards: np.ndarray  # (T-1,)
    z: float
    seed: list = field(default_factory=list)
    fallbacks: int = 0

    @property
    def horizon(self) -> int:
        return len(self.states)

    @property
    def actions(self) -> np.ndarray:
        return mdp.indices_from_bins(self.bins)

    def discounted_return(self, gamma: float) -> float:
        g = 0.0
        for t, r in enumerate(self.rewards):
            g += gamma**t * r
        return g

    @property
    def fallback_rate(self) -> float:
        return self.fallbacks / max(1, len(self.rewards))


@dataclass
class BatchResult:
    trajectories: list
    failures: list  # (episode_id, message)

    @property
    def fallback_rate(self) -> float:
        steps = sum(len(t.rewards) for t in self.trajectories)
        return sum(t.fallbacks for t in self.trajectories) / max(1, steps)


def episode_seed(seed: int, episode_id: str) -> list:
    return [int(seed), zlib.crc32(str(episode_id).encode("utf-8"))]


def thread_count(requested: int | None = None) -> int:
    if requested is None:
        requested = int(os.environ.get("VENTEVAL_THREADS", "1") or 1)
    if requested <= 0:
        requested = os.cpu_count() or 1
    return requested


def _simulate_block(policy, s1, horizons, ids, model, reward_params, seed, noise):
    m = len(s1)
    T = int(horizons.max())
    # two uniforms per step: action draw, residual draw
    U = np.stack([np.random.default_rng(episode_seed(seed, e)).random((MAX_STEPS, 2)) for e in ids])
    S = np.full((m, T, len(STATE_COLUMNS)), np.nan)
    S[:, 0] = s1
    B = np.zeros((m, max(T - 1, 0), 3), dtype=np.int64)
    R = np.zeros((m, max(T - 1, 0)))
    fallbacks = np.zeros(m, dtype=np.int64)
    failed = {}
    alive = np.ones(m, dtype=bool)
    for t in range(T - 1):
        act = alive & (horizons > t + 1)
        rows = np.flatnonzero(act)
        if len(rows) == 0:
            continue
        s_t = S[rows, t]
        a = np.asarray(policy.act(s_t, U[rows, t, 0]), dtype=np.int64)
        bins = mdp.ACTION_BINS[a]
        pred, diag = model.predict(s_t, bins, noise_uniforms=U[rows, t, 1] if noise else None)
        s_next = s_t.copy()
        s_next[:, list(DYNAMIC_IDX)] = pred
        bad = ~np.isfinite(s_next).all(axis=1)
        for k in np.flatnonzero(bad):
            failed[rows[k]] = f"non-finite state at step {t + 2}"
        alive[rows[bad]] = False
        S[rows, t + 1] = s_next
        B[rows, t] = bins
        R[rows, t] = mdp.reward_arrays(s_t[:, SPO2_IDX], s_next[:, SPO2_IDX], bins, reward_params)
        fallbacks[rows] += diag["fallback"].astype(np.int64)
    trajs, fails = [], []
    for i in range(m):
        if i in failed:
            fails.append((str(ids[i]), failed[i]))
            continue
        h = int(horizons[i])
        trajs.append(Trajectory(str(ids[i]), S[i, :h].copy(), B[i, : h - 1].copy(), R[i, : h - 1].copy(),
                                float(s1[i, -1]), episode_seed(seed, ids[i]), int(fallbacks[i])))
    return trajs, fails


def batch_simulate(policy, initial_states, horizons, model, reward_params: mdp.RewardParams | None = None,
                   seed: int = 0, episode_ids=None, noise: bool = False, n_threads: int | None = None) -> BatchResult:
    """Simulate one trajectory per initial state with its true horizon.

    Parameters
    ----------
    policy : object with ``act(states, uniforms)``
    initial_states : (n, 16) first states, z included
    horizons : (n,) episode lengths, each >= 2
    model : fitted NweModel
    noise : add residual-bootstrap noise to each prediction
    n_threads : shard the batch across threads; defaults to VENTEVAL_THREADS
    """
    s1 = np.atleast_2d(np.asarray(initial_states, dtype=float))
    horizons = np.asarray(horizons, dtype=np.int64)
    if len(s1) == 0:
        raise ValueError("empty batch")
    if len(horizons) != len(s1):
        raise ValueError("one horizon per initial state")
    if np.any(horizons < 2) or np.any(horizons > MAX_STEPS):
        raise ValueError(f"horizons must lie in [2, {MAX_STEPS}]")
    if not np.isfinite(s1).all():
        raise ValueError("initial states must be complete")
    ids = np.array([f"ep{i}" for i in range(len(s1))] if episode_ids is None else [str(e) for e in episode_ids],
                   dtype=object)
    if len(set(ids.tolist())) != len(ids):
        raise ValueError("episode ids must be unique")
    rp = reward_params or mdp.RewardParams()
    k = min(thread_count(n_threads), len(s1))
    if noise and k > 1:
        model.residuals()  # fill the lazy cache before threads share the model
    if k <= 1:
        trajs, fails = _simulate_block(policy, s1, horizons, ids, model, rp, seed, noise)
        return BatchResult(trajs, fails)
    shards = np.array_split(np.arange(len(s1)), k)
    with ThreadPoolExecutor(max_workers=k) as pool:
        parts = list(pool.map(lambda ix: _simulate_block(policy, s1[ix], horizons[ix], ids[ix], model, rp, seed,
                                                         noise), shards))
    return BatchResult([t for p in parts for t in p[0]], [f for p in parts for f in p[1]])


def simulate_trajectory(policy, s1, T: int, model, propensity=None, rng_seed: int = 0, type_features=None,
                        reward_params: mdp.RewardParams | None = None, episode_id: str = "ep0",
                        noise: bool = False) -> Trajectory:
    """Single rollout; z is recomputed from ``type_features`` when a propensity model is given."""
    s1 = np.asarray(s1, dtype=float).copy()
    if len(s1) == len(STATE_FEATURES):
        s1 = np.append(s1, 0.0)
    if propensity is not None:
        if type_features is None:
            raise ValueError("type_features needed to compute z")
        s1[-1] = float(propensity.predict(np.asarray(type_features, dtype=float)[None, :])[0])
    res = batch_simulate(policy, s1[None, :], [T], model, reward_params, rng_seed, [episode_id], noise, 1)
    if res.failures:
        raise RuntimeError(f"episode {episode_id}: {res.failures[0][1]}")
    return res.trajectories[0]


def initial_conditions(episodes, propensity):
    """(states, horizons, ids) for a list of EpisodeRecords, z from step-1 type features."""
    from .ingest import episode_states
    s1, hz, ids = [], [], []
    for ep in episodes:
        z = float(propensity.predict(ep.type_features(0)[None, :])[0]) if propensity is not None else 0.0
        s1.append(episode_states(ep, z)[0])
        hz.append(ep.length)
        ids.append(ep.episode_id)
    return np.array(s1), np.array(hz), ids


# -- export -------------------------------------------------------------------


def trajectories_to_frame(trajs) -> pd.DataFrame:
    """Per-step rows in the episode layout, plus bins, reward and ``simulated``."""
    from .ingest import STEP_HEADER
    rows = []
    for tr in trajs:
        T = tr.horizon
        df = pd.DataFrame(np.nan, index=np.arange(T), columns=list(STEP_HEADER[2:]))
        for j, f in enumerate(STATE_FEATURES):
            if f in df.columns:
                df[f] = tr.states[:, j]
        reps = np.full((T, 3), np.nan)
        bins = np.full((T, 3), np.nan)
        rew = np.full(T, np.nan)
        for t in range(T - 1):
            reps[t] = mdp.representative_action(tr.bins[t])
            bins[t] = tr.bins[t]
            rew[t] = tr.rewards[t]
        df["vt_set"], df["peep"], df["fio2"] = reps[:, 0], reps[:, 1], reps[:, 2]
        df.insert(0, "step_index", np.arange(1, T + 1))
        df.insert(0, "episode_id", tr.episode_id)
        for j, f in enumerate(("sepsis", "weight", "age")):
            df[f] = tr.states[:, STATE_FEATURES.index(f)]
        df["z"] = tr.z
        df["vt_bin"], df["peep_bin"], df["fio2_bin"] = bins[:, 0], bins[:, 1], bins[:, 2]
        df["reward"] = rew
        df["simulated"] = True
        rows.append(df)
    return pd.concat(rows, ignore_index=True)


def trajectories_from_frame(df: pd.DataFrame) -> list[Trajectory]:
    """Inverse of :func:`trajectories_to_frame` (seeds and fallback counts are not stored)."""
    missing = [c for c in ("episode_id", "step_index", "vt_bin", "peep_bin", "fio2_bin", "reward", "z")
               if c not in df.columns]
    if missing:
        raise ValueError(f"trajectory file lacks columns {missing}")
    out = []
    for eid, grp in df.groupby("episode_id", sort=False):
        grp = grp.sort_values("step_index")
        S = np.column_stack([grp[f].to_numpy(dtype=float) for f in STATE_FEATURES] + [grp["z"].to_numpy(dtype=float)])
        bins = grp[["vt_bin", "peep_bin", "fio2_bin"]].to_numpy(dtype=float)[:-1].astype(np.int64)
        out.append(Trajectory(str(eid), S, bins, grp["reward"].to_numpy(dtype=float)[:-1], float(S[0, -1])))
    return out


def diagnostics(result: BatchResult) -> dict:
    return {
        "n_trajectories": len(result.trajectories),
        "fallback_rate": result.fallback_rate,
        "episodes": [{"episode_id": t.episode_id, "seed": t.seed, "fallbacks": t.fallbacks, "horizon": t.horizon}
                     for t in result.trajectories],
        "failures": [{"episode_id": e, "error": msg} for e, msg in result.failures],
    }
