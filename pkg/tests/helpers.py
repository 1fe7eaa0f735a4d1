"""Small builders for hand-made transition sets."""

import numpy as np

from venteval import mdp
from venteval.policies import FeatureMap
from venteval.dataset import TransitionSet
from venteval.schema import STATE_DIM


def make_transitions(states, actions, rewards, next_states=None, dones=None, episode_id=None, t=None):
    states = np.asarray(states, dtype=float)
    if states.ndim == 1 or states.shape[1] != STATE_DIM:
        full = np.zeros((len(states), STATE_DIM))
        s = states.reshape(len(states), -1)
        full[:, : s.shape[1]] = s
        states = full
    n = len(states)
    actions = np.asarray(actions, dtype=np.int64)
    return TransitionSet(
        episode_id=np.asarray(episode_id if episode_id is not None else [f"e{i}" for i in range(n)], dtype=object),
        t=np.asarray(t if t is not None else np.ones(n, dtype=np.int64)),
        states=states,
        bins=mdp.ACTION_BINS[actions],
        rewards=np.asarray(rewards, dtype=float),
        next_states=states.copy() if next_states is None else np.asarray(next_states, dtype=float),
        dones=np.ones(n, dtype=bool) if dones is None else np.asarray(dones, dtype=bool),
    )


def bandit_transitions(action_rewards: dict, reps: int = 50, seed: int = 0):
    """Single-state bandit: every action in ``action_rewards`` logged ``reps`` times."""
    acts = np.repeat(list(action_rewards), reps)
    rng = np.random.default_rng(seed)
    acts = acts[rng.permutation(len(acts))]
    rew = np.array([action_rewards[a] for a in acts], dtype=float)
    return make_transitions(np.zeros((len(acts), STATE_DIM)), acts, rew)


class TabularPolicy:
    """Policy over a coded state stored in column 0 of the state vector."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)

    def probs(self, states):
        return self.table[np.asarray(states)[:, 0].astype(int)]


def tabular_transitions(sample):
    """TransitionSet from :meth:`TabularMDP.sample` output, state id in column 0."""
    n = len(sample["s"])
    S = np.zeros((n, STATE_DIM))
    S2 = np.zeros((n, STATE_DIM))
    S[:, 0] = sample["s"]
    S2[:, 0] = sample["s_next"]
    return make_transitions(S, sample["a"], sample["r"], next_states=S2, dones=np.zeros(n, dtype=bool),
                            episode_id=[f"e{e}" for e in sample["episode"]], t=sample["t"])


def two_clusters(seed=0, n=200):
    """Two clusters on feature 0 with different optimal actions (20 left, 40 right)."""
    rng = np.random.default_rng(seed)
    x0 = np.r_[rng.uniform(0, 1, n), rng.uniform(3, 4, n)]
    S = np.zeros((2 * n, STATE_DIM))
    S[:, 0] = x0
    S[:, 1] = rng.normal(size=2 * n)  # uninformative
    acts = rng.choice([20, 40], size=2 * n)
    left = x0 < 2
    rew = np.where(left, np.where(acts == 20, 1.0, 0.0), np.where(acts == 40, 1.0, 0.0))
    return make_transitions(S, acts, rew)


def random_cq_problem(rng):
    """Small random conservative-Q objective instance: (fmap, Xs, acts, y, theta)."""
    n = int(rng.integers(3, 12))
    S = rng.normal(size=(n, STATE_DIM))
    fmap = FeatureMap.fit(S)
    Xs = fmap.standardize(S)
    acts = rng.integers(0, mdp.N_ACTIONS, n)
    y = rng.normal(size=n)
    theta = 0.3 * rng.normal(size=fmap.dim)
    return fmap, Xs, acts, y, theta


# restricted bandit: three logged actions with their rewards
COVERED = {10: -0.2, 50: -0.5, 100: -1.0}
