"""Synthetic ventilation MDP with known dynamics, used as a test oracle.

A latent binary severity type shifts both the physiology and the mortality
label, and clinicians (the behaviour policy) react to a severity score seen
at admission, so the propensity score has confounding to correct.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import mdp
from .dataset import EpisodeRecord
from .propensity import sigmoid
from .schema import (
    DYNAMIC_FEATURES,
    STATE_FEATURES,
    STEP_COLUMNS,
    TYPE_FEATURES,
)
from .transition import BandwidthSet

# Cross-validated choice for the default env: select_bandwidths over the full
# grid on a 500-episode behaviour cohort (env seed 0, cohort seed 77, 5 folds).
DEFAULT_ENV_BANDWIDTHS = BandwidthSet(3.036, 2.8, 1.532, 2.532, 1.5, 2.0, 1e-4)

# behaviour-policy support: (vt, peep, fio2) bins
SUPPORT = (
    (3, 1, 2), (3, 2, 3), (4, 1, 3), (4, 2, 3),
    (4, 2, 4), (5, 2, 5), (6, 2, 3), (6, 3, 5),
)
_BASE_SCORE = np.array([0.5, 0.8, 0.6, 1.0, 0.0, -0.5, -0.8, -1.5])
_DEFICIT_COEF = np.array([-0.3, -0.2, -0.1, 0.0, 0.6, 0.9, 0.5, 1.2])
_SEVERITY_COEF = np.array([-0.4, -0.3, -0.2, 0.0, 0.4, 0.6, 0.3, 0.8])

# dynamic features other than SpO2: (mean, scale) in physiological units
_PHYS = {
    "heart_rate": (88.0, 15.0), "resp_rate": (20.0, 5.0), "pf_ratio": (230.0, 70.0),
    "spont_vt": (420.0, 90.0), "map": (11.0, 3.0), "paco2": (41.0, 7.0),
    "sys_bp": (118.0, 18.0), "dia_bp": (60.0, 10.0), "cum_fluid_balance": (1500.0, 2000.0),
    "pao2": (105.0, 30.0), "gcs": (10.0, 3.0),
}
_OTHER = tuple(f for f in DYNAMIC_FEATURES if f != "spo2")
# action loadings on the standardized features (vt, peep, fio2 columns)
_B = {
    "pao2": (0.0, 0.1, 0.4), "map": (0.1, 0.5, 0.0), "paco2": (-0.3, 0.0, 0.0),
    "spont_vt": (0.2, 0.0, 0.0), "pf_ratio": (0.0, 0.15, 0.0),
}
_SEVERITY_SHIFT = {"heart_rate": 0.5, "pf_ratio": -0.6, "pao2": -0.4, "sys_bp": -0.3, "gcs": -0.4, "map": 0.3}


@dataclass(frozen=True)
class SyntheticEnv:
    seed: int = 0
    p_severe: float = 0.4
    min_horizon: int = 6
    max_horizon: int = 18
    state_rho: float = 0.8
    state_noise: float = 0.3
    spo2_rho: float = 0.6
    spo2_noise: float = 1.0
    spo2_base: float = 93.5
    spo2_severity: float = 3.0
    temperature: float = 1.0
    missing_rate: float = 0.0

    def __post_init__(self):
        if not 1 <= self.min_horizon <= self.max_horizon <= 18:
            raise ValueError("horizons must satisfy 1 <= min <= max <= 18")

    # -- config -----------------------------------------------------------

    def to_config(self) -> str:
        lines = [f"{k} = {v}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_config(cls, text: str) -> "SyntheticEnv":
        cp = configparser.ConfigParser()
        cp.read_string("[env]\n" + text)
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in cp["env"].items():
            if k not in kinds:
                raise ValueError(f"unknown env key {k!r}")
            kw[k] = int(v) if kinds[k] in ("int", int) else float(v)
        return cls(**kw)

    # -- dynamics ---------------------------------------------------------

    @property
    def transition_matrix(self) -> np.ndarray:
        """Block-diagonal AR matrix over the 11 non-SpO2 standardized features."""
        k = len(_OTHER)
        A = self.state_rho * np.eye(k)
        groups = (("heart_rate", "sys_bp", "dia_bp"), ("resp_rate", "spont_vt", "pf_ratio", "map"),
                  ("paco2", "pao2"), ("gcs", "cum_fluid_balance"))
        for g in groups:
            idx = [_OTHER.index(f) for f in g]
            for i in idx:
                for j in idx:
                    if i != j:
                        A[i, j] = 0.05
        return A

    def _action_features(self, bins):
        reps = np.stack([np.array(mdp.VT_REPS)[bins[:, 0] - 1],
                         np.array(mdp.PEEP_REPS)[bins[:, 1] - 1],
                         np.array(mdp.FIO2_REPS)[bins[:, 2] - 1]], axis=1)
        return (reps - np.array([6.5, 9.0, 0.5])) / np.array([2.0, 4.0, 0.2])

    def _spo2_target(self, y, phi, u):
        pf = y[:, _OTHER.index("pf_ratio")]
        return (self.spo2_base + 4.0 * phi[:, 2] + 1.2 * phi[:, 0] + 0.8 * phi[:, 1]
                + 1.0 * pf - self.spo2_severity * u)

    def step(self, y, spo2, bins, u, rng, noise=True):
        """Advance internal standardized features ``y`` and SpO2 one step."""
        phi = self._action_features(bins)
        B = np.zeros((len(_OTHER), 3))
        for f, load in _B.items():
            B[_OTHER.index(f)] = load
        shift = np.zeros(len(_OTHER))
        for f, v in _SEVERITY_SHIFT.items():
            shift[_OTHER.index(f)] = v
        y_next = y @ self.transition_matrix.T + phi @ B.T + (1 - self.state_rho) * u[:, None] * shift
        target = self._spo2_target(y, phi, u)
        spo2_next = self.spo2_rho * spo2 + (1 - self.spo2_rho) * target
        if noise:
            y_next = y_next + self.state_noise * rng.standard_normal(y.shape)
            spo2_next = spo2_next + self.spo2_noise * rng.standard_normal(len(spo2))
        return y_next, np.clip(spo2_next, 0.0, 100.0)

    def behavior_probs(self, spo2, sofa) -> np.ndarray:
        """Clinician action distribution over SUPPORT given SpO2 and admission SOFA."""
        deficit = (95.0 - spo2) / 3.0
        sev = (sofa - 7.0) / 3.0
        scores = _BASE_SCORE[None, :] + _DEFICIT_COEF[None, :] * deficit[:, None] + _SEVERITY_COEF[None, :] * sev[:, None]
        scores = scores / self.temperature
        scores -= scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        return p / p.sum(axis=1, keepdims=True)

    # -- sampling ---------------------------------------------------------

    def _initial(self, n, rng):
        u = (rng.random(n) < self.p_severe).astype(float)
        static = {
            "sex": (rng.random(n) < 0.45).astype(float),
            "sepsis": (rng.random(n) < 0.3 + 0.3 * u).astype(float),
            "weight": np.clip(rng.normal(80, 15, n), 40, 160),
            "age": np.clip(rng.normal(62, 14, n), 18, 95),
            "icu_readmission": (rng.random(n) < 0.1 + 0.1 * u).astype(float),
        }
        mort_p = sigmoid(-1.0 + 1.8 * u + 0.03 * (static["age"] - 60))
        static["mortality_90d"] = (rng.random(n) < mort_p).astype(float)
        types = {
            "sofa": np.clip(5 + 4 * u + rng.normal(0, 2, n), 0, 24),
            "sirs": np.clip(np.round(2 + u + rng.normal(0, 0.8, n)), 0, 4),
            "shock_index": 0.75 + 0.2 * u + rng.normal(0, 0.15, n),
            "total_iv_fluids": np.maximum(0, 1500 + 800 * u + rng.normal(0, 600, n)),
            "urine_output": np.maximum(0, 150 - 50 * u + rng.normal(0, 50, n)),
            "mean_bp": 78 - 6 * u + rng.normal(0, 10, n),
            "temperature": 37.2 + 0.5 * u + rng.normal(0, 0.6, n),
            "oxygenation_index": np.maximum(1, 8 + 4 * u + rng.normal(0, 3, n)),
        }
        shift = np.zeros(len(_OTHER))
        for f, v in _SEVERITY_SHIFT.items():
            shift[_OTHER.index(f)] = v
        y = u[:, None] * shift[None, :] + 0.8 * rng.standard_normal((n, len(_OTHER)))
        spo2 = np.clip(self.spo2_base - self.spo2_severity * u - 1.0 + 2.0 * rng.standard_normal(n), 0, 100)
        horizon = rng.integers(self.min_horizon, self.max_horizon + 1, n)
        return u, static, types, y, spo2, horizon

    def _phys_state(self, y, spo2, static):
        """(n, 15) observable features in physiological units."""
        out = np.empty((len(spo2), len(STATE_FEATURES)))
        for j, f in enumerate(STATE_FEATURES):
            if f in static:
                out[:, j] = static[f]
            elif f == "spo2":
                out[:, j] = spo2
            else:
                mu, sd = _PHYS[f]
                v = mu + sd * y[:, _OTHER.index(f)]
                out[:, j] = np.clip(v, 3, 15) if f == "gcs" else v
        return out

    def _raw_settings(self, bins, rng):
        n = len(bins)

        def draw(edges, top, b):
            lo = np.array(edges)[b - 1]
            hi = np.array(list(edges[1:]) + [top])[b - 1]
            return lo + (hi - lo) * (0.05 + 0.9 * rng.random(n))

        return (draw(mdp.VT_EDGES, 12.5, bins[:, 0]), draw(mdp.PEEP_EDGES, 18.0, bins[:, 1]),
                draw(mdp.FIO2_EDGES, 1.0, bins[:, 2]))

    def sample_cohort(self, n_episodes: int, seed: int | None = None, id_prefix: str = "syn") -> list[EpisodeRecord]:
        """Draw episodes under the behaviour policy, fully observed, raw settings in physical units."""
        if n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")
        rng = np.random.default_rng(self.seed if seed is None else seed)
        n = n_episodes
        u, static, types, y, spo2, horizon = self._initial(n, rng)
        T = int(horizon.max())
        support = np.array(SUPPORT)
        steps = np.zeros((n, T, len(STEP_COLUMNS)))
        pos = {c: i for i, c in enumerate(STEP_COLUMNS)}
        for t in range(T):
            phys = self._phys_state(y, spo2, static)
            for j, f in enumerate(STATE_FEATURES):
                if f in pos:
                    steps[:, t, pos[f]] = phys[:, j]
            for f, v in types.items():
                jitter = {"sofa": 0.5, "sirs": 0.0, "shock_index": 0.03, "total_iv_fluids": 50.0,
                          "urine_output": 10.0, "mean_bp": 2.0, "temperature": 0.1, "oxygenation_index": 0.5}[f]
                steps[:, t, pos[f]] = v if t == 0 else v + jitter * rng.standard_normal(n)
            probs = self.behavior_probs(spo2, types["sofa"])
            choice = (rng.random(n)[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
            choice = np.minimum(choice, len(SUPPORT) - 1)
            bins = support[choice]
            vt, peep, fio2 = self._raw_settings(bins, rng)
            steps[:, t, pos["vt_set"]] = vt
            steps[:, t, pos["peep"]] = peep
            steps[:, t, pos["fio2"]] = fio2
            y, spo2 = self.step(y, spo2, bins, u, rng)
        width = max(5, len(str(n)))
        episodes = []
        for i in range(n):
            st = {k: float(v[i]) for k, v in static.items()}
            episodes.append(EpisodeRecord(
                episode_id=f"{id_prefix}-{i:0{width}d}",
                static=st,
                steps=steps[i, : horizon[i]].copy(),
                imputation_fraction={s: 0.0 for s in ("vt_set", "peep", "fio2")},
            ))
        return episodes

    # -- oracle values ----------------------------------------------------

    def _rollout(self, n, rng, choose, reward_params, gamma):
        u, static, types, y, spo2, horizon = self._initial(n, rng)
        T = int(horizon.max())
        disc = mdp.discount_factors(gamma, T)
        ret = np.zeros(n)
        for t in range(T - 1):
            active = horizon > t + 1
            bins = choose(y, spo2, static, types, rng)
            y_next, spo2_next = self.step(y, spo2, bins, u, rng)
            r = mdp.reward_arrays(spo2, spo2_next, bins, reward_params)
            ret += np.where(active, disc[t] * r, 0.0)
            y, spo2 = y_next, spo2_next
        return ret

    def behavior_value(self, n_rollouts: int, reward_params=mdp.RewardParams(), seed: int = 0):
        """Monte-Carlo value of the clinician policy: (mean, standard error)."""
        support = np.array(SUPPORT)

        def choose(y, spo2, static, types, rng):
            probs = self.behavior_probs(spo2, types["sofa"])
            c = np.minimum((rng.random(len(spo2))[:, None] > np.cumsum(probs, axis=1)).sum(axis=1), len(SUPPORT) - 1)
            return support[c]

        ret = self._rollout(n_rollouts, np.random.default_rng(seed), choose, reward_params, reward_params.gamma)
        return float(ret.mean()), float(ret.std(ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0

    def state_vectors(self, y, spo2, static, types, propensity=None) -> np.ndarray:
        """(n, 16) state vectors; z from ``propensity`` applied to admission types."""
        obs = self._phys_state(y, spo2, static)
        if propensity is None:
            z = np.zeros(len(spo2))
        else:
            tf = np.stack([types[f] if f in types else static[f] for f in TYPE_FEATURES], axis=1)
            z = propensity.predict(tf)
        return np.column_stack([obs, z])

    def policy_value(self, policy, n_rollouts: int, reward_params=mdp.RewardParams(), propensity=None,
                     seed: int = 0):
        """Monte-Carlo value of a state-based policy under the true dynamics."""
        cache = {}

        def choose(y, spo2, static, types, rng):
            if "z" not in cache:
                cache["z"] = self.state_vectors(y, spo2, static, types, propensity)[:, -1]
            s = np.column_stack([self._phys_state(y, spo2, static), cache["z"]])
            a = policy.act(s, rng.random(len(spo2)))
            return mdp.ACTION_BINS[a]

        ret = self._rollout(n_rollouts, np.random.default_rng(seed), choose, reward_params, reward_params.gamma)
        return float(ret.mean()), float(ret.std(ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0


def true_policy_value(env, policy, gamma: float = mdp.GAMMA, n_rollouts: int = 10_000,
                      reward_params: mdp.RewardParams | None = None, propensity=None, seed: int = 0):
    """Discounted value of ``policy`` as (mean, SE).

    ``policy`` may be 'behavior' for the clinician policy.  When ``env`` is a
    :class:`TabularMDP`, ``policy`` is an (S, A) probability table and the
    exact dynamic-programming value is returned with zero error.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    rp = reward_params or mdp.RewardParams(gamma=gamma)
    if rp.gamma != gamma:
        rp = mdp.RewardParams(rp.alpha, rp.beta, rp.spo2_cap, gamma)
    if isinstance(env, TabularMDP):
        return float(env.init @ env.dp_value(policy, gamma)), 0.0
    if isinstance(policy, str) and policy == "behavior":
        return env.behavior_value(n_rollouts, rp, seed)
    return env.policy_value(policy, n_rollouts, rp, propensity, seed)


class TabularMDP:
    """Finite MDP for exact dynamic-programming checks."""

    def __init__(self, n_states: int, n_actions: int, seed: int = 0, reward_scale: float = 1.0):
        rng = np.random.default_rng(seed)
        self.n_states, self.n_actions = n_states, n_actions
        self.P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        self.R = reward_scale * rng.normal(size=(n_states, n_actions))
        self.init = rng.dirichlet(np.ones(n_states))

    def dp_value(self, policy_probs, gamma: float, R=None, P=None) -> np.ndarray:
        """State values solving V = R_pi + gamma P_pi V."""
        R = self.R if R is None else R
        P = self.P if P is None else P
        pi = np.asarray(policy_probs)
        R_pi = (pi * R).sum(axis=1)
        P_pi = np.einsum("sa,sat->st", pi, P)
        return np.linalg.solve(np.eye(self.n_states) - gamma * P_pi, R_pi)

    def sample(self, n_episodes: int, horizon: int, behavior_probs, seed: int = 0, reward_noise: float = 0.0):
        """Episodes as arrays (s, a, r, s') stacked over steps; no terminal flags."""
        rng = np.random.default_rng(seed)
        s = rng.choice(self.n_states, size=n_episodes, p=self.init)
        rows = []
        for t in range(horizon):
            a = np.array([rng.choice(self.n_actions, p=behavior_probs[si]) for si in s])
            s2 = np.array([rng.choice(self.n_states, p=self.P[si, ai]) for si, ai in zip(s, a)])
            r = self.R[s, a] + reward_noise * rng.standard_normal(n_episodes)
            rows.append((np.arange(n_episodes), np.full(n_episodes, t + 1), s, a, r, s2))
            s = s2
        ep, tt, ss, aa, rr, s2 = (np.concatenate(c) for c in zip(*rows))
        return {"episode": ep, "t": tt, "s": ss, "a": aa, "r": rr, "s_next": s2}

    def mc_value(self, policy_probs, gamma: float, horizon: int, n_rollouts: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        s = rng.choice(self.n_states, size=n_rollouts, p=self.init)
        ret = np.zeros(n_rollouts)
        pi = np.asarray(policy_probs)
        for t in range(horizon):
            c = np.cumsum(pi[s], axis=1)
            a = np.minimum((rng.random(n_rollouts)[:, None] > c).sum(axis=1), self.n_actions - 1)
            c2 = np.cumsum(self.P[s, a], axis=1)
            s2 = np.minimum((rng.random(n_rollouts)[:, None] > c2).sum(axis=1), self.n_states - 1)
            ret += gamma**t * self.R[s, a]
            s = s2
        return float(ret.mean()), float(ret.std(ddof=1) / np.sqrt(n_rollouts))
