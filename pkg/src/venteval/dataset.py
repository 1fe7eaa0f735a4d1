"""Episode and transition containers shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import mdp
from .schema import DYNAMIC_IDX, SPO2_IDX, STEP_COLUMNS, TYPE_FEATURES, Z_IDX

_STEP_POS = {c: i for i, c in enumerate(STEP_COLUMNS)}


@dataclass
class RawEpisode:
    """One ventilation event as read from disk; NaN marks a missing value."""

    episode_id: str
    static: dict
    steps: np.ndarray  # (T, len(STEP_COLUMNS))
    icd9_codes: tuple = ()

    @property
    def length(self) -> int:
        return len(self.steps)

    def column(self, name: str) -> np.ndarray:
        return self.steps[:, _STEP_POS[name]]


@dataclass
class EpisodeRecord:
    """A fully imputed episode, 2 <= T <= 18."""

    episode_id: str
    static: dict
    steps: np.ndarray
    imputation_fraction: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.steps)

    def column(self, name: str) -> np.ndarray:
        return self.steps[:, _STEP_POS[name]]

    def type_features(self, step: int = 0) -> np.ndarray:
        """The propensity model inputs, read at ``step`` (static ones from ``static``)."""
        out = []
        for name in TYPE_FEATURES:
            if name in _STEP_POS:
                out.append(self.steps[step, _STEP_POS[name]])
            else:
                out.append(float(self.static[name]))
        return np.asarray(out, dtype=float)

    def action_bins(self) -> np.ndarray:
        return mdp.discretize_arrays(self.column("vt_set"), self.column("peep"), self.column("fio2"))


@dataclass
class TransitionSet:
    """Column-oriented (s, a, r, s', z, t, episode-id) tuples."""

    episode_id: np.ndarray
    t: np.ndarray
    states: np.ndarray
    bins: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __post_init__(self):
        n = len(self.t)
        for name in ("episode_id", "states", "bins", "rewards", "next_states", "dones"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has inconsistent length")

    def __len__(self):
        return len(self.t)

    @property
    def actions(self) -> np.ndarray:
        return mdp.indices_from_bins(self.bins)

    @property
    def z(self) -> np.ndarray:
        return self.states[:, Z_IDX]

    @property
    def targets(self) -> np.ndarray:
        """Next-state features minus the three static ones."""
        return self.next_states[:, list(DYNAMIC_IDX)]

    def subset(self, mask) -> "TransitionSet":
        mask = np.asarray(mask)
        return TransitionSet(
            episode_id=self.episode_id[mask],
            t=self.t[mask],
            states=self.states[mask],
            bins=self.bins[mask],
            rewards=self.rewards[mask],
            next_states=self.next_states[mask],
            dones=self.dones[mask],
        )

    def with_rewards(self, params: mdp.RewardParams) -> "TransitionSet":
        r = mdp.reward_arrays(self.states[:, SPO2_IDX], self.next_states[:, SPO2_IDX], self.bins, params)
        return replace(self, rewards=r)

    def without_z(self) -> "TransitionSet":
        s, sn = self.states.copy(), self.next_states.copy()
        s[:, Z_IDX] = 0.0
        sn[:, Z_IDX] = 0.0
        return replace(self, states=s, next_states=sn)

    def episode_slices(self) -> dict:
        """Map episode id -> index array ordered by t."""
        out = {}
        for i, e in enumerate(self.episode_id):
            out.setdefault(e, []).append(i)
        return {e: np.array(sorted(ix, key=lambda j: self.t[j])) for e, ix in out.items()}

    @property
    def initial_mask(self) -> np.ndarray:
        return self.t == 1
