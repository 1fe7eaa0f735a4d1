"""Off-policy value estimates: per-step weighted IS, fitted-Q evaluation and
model-based matching, with percentile bootstrap intervals."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import mdp
from .policies.features import FeatureMap
from .schema import SPO2_IDX
from .simulator import batch_simulate, thread_count

log = logging.getLogger(__name__)

RATIO_CLIP = 1e3
BLOCK = 100  # bootstrap resamples per derived seed


@dataclass
class OpeEstimate:
    method: str
    value: float
    ci_low: float | None = None
    ci_high: float | None = None
    level: float | None = None
    n_episodes: int = 0
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


@dataclass
class ClinicalMetrics:
    pct_terminal_spo2_above_95: float
    mean_delta_spo2_among_below_95: float | None
    pct_steps_vt_aggressive: float
    pct_steps_fio2_aggressive: float

    def to_dict(self):
        return asdict(self)

    @property
    def combined_aggressive(self) -> float:
        return self.pct_steps_vt_aggressive + self.pct_steps_fio2_aggressive


# -- bootstrap ----------------------------------------------------------------


def bootstrap_distribution(n: int, B: int, seed: int, stat, n_threads: int | None = 1) -> np.ndarray:
    """Apply ``stat`` to B episode resamples.

    ``stat`` maps an (b, n) index array to b statistics.  Resamples come in
    blocks of 100, block j drawing from ``default_rng([seed, j])``, so the
    result is the same whatever the thread count.
    """
    blocks = [(j, min(BLOCK, B - j * BLOCK)) for j in range((B + BLOCK - 1) // BLOCK)]

    def run(job):
        j, b = job
        idx = np.random.default_rng([seed, j]).integers(0, n, size=(b, n))
        return np.asarray(stat(idx), dtype=float)

    k = thread_count(n_threads)
    if k <= 1:
        parts = [run(job) for job in blocks]
    else:
        with ThreadPoolExecutor(max_workers=k) as pool:
            parts = list(pool.map(run, blocks))
    return np.concatenate(parts)


def percentile_interval(dist, level: float) -> tuple[float, float]:
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(dist, [a, 1.0 - a])
    return float(lo), float(hi)


def bootstrap_ci(stats, B: int = 1000, level: float = 0.95, seed: int = 0,
                 n_threads: int | None = 1) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of per-episode statistics."""
    x = np.asarray(stats, dtype=float)
    if len(x) < 2:
        raise ValueError("bootstrap needs at least 2 episodes")
    if B < 100:
        raise ValueError("B must be >= 100")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    dist = bootstrap_distribution(len(x), B, seed, lambda idx: x[idx].mean(axis=1), n_threads)
    return percentile_interval(dist, level)


# -- episode matrices -------------------------------------------------------------


def _episode_matrix(episode_id, t, values, fill=0.0, hold=False):
    """Stack per-transition values into an (n_episodes, L) matrix ordered by t.

    With ``hold`` the last value of each episode is carried into the padding.
    """
    eids = np.asarray(episode_id)
    uniq, inv = np.unique(eids, return_inverse=True)
    order = np.lexsort((t, inv))
    inv_s = inv[order]
    pos = np.zeros(len(order), dtype=np.int64)
    starts = np.searchsorted(inv_s, np.arange(len(uniq)))
    pos = np.arange(len(order)) - starts[inv_s]
    L = int(pos.max()) + 1
    M = np.full((len(uniq), L), fill, dtype=float)
    M[inv_s, pos] = np.asarray(values, dtype=float)[order]
    lengths = np.bincount(inv_s, minlength=len(uniq))
    if hold:
        for j in range(1, L):
            pad = lengths <= j
            M[pad, j] = M[pad, j - 1]
    return uniq, M, lengths


def discounted_returns(episode_id, t, rewards, gamma: float) -> np.ndarray:
    """Per-episode sum_t gamma^(t-1) r_t, accumulated step by step."""
    _, Rm, _ = _episode_matrix(episode_id, t, rewards)
    disc = mdp.discount_factors(gamma, Rm.shape[1])
    G = np.zeros(len(Rm))
    for j in range(Rm.shape[1]):
        G = G + disc[j] * Rm[:, j]
    return G


def _logged_probs(policy_or_probs, states, actions, what):
    if callable(getattr(policy_or_probs, "probs", None)):
        fn = policy_or_probs.behavior_probs if what == "behavior" and hasattr(policy_or_probs, "behavior_probs") \
            else policy_or_probs.probs
        P = fn(states)
        return P[np.arange(len(actions)), actions]
    p = np.asarray(policy_or_probs, dtype=float)
    if p.ndim == 2:
        return p[np.arange(len(actions)), actions]
    return p


# -- PSWIS -----------------------------------------------------------------------


def _pswis_from_matrices(rho, Rm, disc):
    """Estimate(s) for ratio matrices of shape (..., n, L).

    A step where every cumulative ratio is zero contributes nothing.
    """
    w = rho.mean(axis=-2, keepdims=True)
    G = np.zeros(rho.shape[:-1])
    for j in range(rho.shape[-1]):
        wj = w[..., j]
        norm = np.divide(rho[..., j], wj, out=np.zeros_like(rho[..., j]), where=wj > 0)
        G = G + disc[j] * norm * Rm[..., j]
    return G.mean(axis=-1)


def pswis_estimate(transitions, pi_e, pi_b, gamma: float = mdp.GAMMA, clip: float = RATIO_CLIP,
                   B: int = 0, level: float = 0.95, seed: int = 0, n_threads: int | None = 1) -> OpeEstimate:
    """Per-step weighted importance sampling.

    V = (1/n) sum_i sum_t gamma^(t-1) (rho_i,1:t / w_t) r_i,t with
    w_t = (1/n) sum_i rho_i,1:t.  Episodes shorter than the longest are
    padded with zero reward and their last cumulative ratio.

    ``pi_e`` and ``pi_b`` are policies (``probs``; a behaviour policy's
    ``behavior_probs`` is preferred) or arrays of logged-action probabilities.
    """
    actions = np.asarray(transitions.actions, dtype=np.int64)
    pe = _logged_probs(pi_e, transitions.states, actions, "target")
    pb = _logged_probs(pi_b, transitions.states, actions, "behavior")
    zero = np.flatnonzero(~(pb > 0))
    if len(zero):
        i = zero[0]
        raise ValueError(f"behaviour probability is zero for episode {transitions.episode_id[i]} "
                         f"step {transitions.t[i]}")
    ratio = pe / pb
    clipped = ratio > clip
    ratio = np.minimum(ratio, clip)
    _, rm, lengths = _episode_matrix(transitions.episode_id, transitions.t, ratio, fill=1.0)
    rho = np.cumprod(rm, axis=1)
    for j in range(1, rho.shape[1]):
        pad = lengths <= j
        rho[pad, j] = rho[pad, j - 1]
    _, Rm, _ = _episode_matrix(transitions.episode_id, transitions.t, transitions.rewards)
    disc = mdp.discount_factors(gamma, Rm.shape[1])
    value = float(_pswis_from_matrices(rho, Rm, disc))
    sq = (rho**2).sum(axis=0)
    ess = np.divide(rho.sum(axis=0) ** 2, sq, out=np.zeros_like(sq), where=sq > 0).tolist()
    est = OpeEstimate("wis", value, n_episodes=len(Rm),
                      diagnostics={"ess_per_step": ess, "clip_fraction": float(clipped.mean())})
    if B:
        if len(Rm) < 2:
            raise ValueError("bootstrap needs at least 2 episodes")
        dist = bootstrap_distribution(len(Rm), B, seed, lambda idx: _pswis_from_matrices(rho[idx], Rm[idx], disc),
                                      n_threads)
        est.ci_low, est.ci_high = percentile_interval(dist, level)
        est.level = level
    return est


# -- FQE ------------------------------------------------------------------------


def _tabular_keys(states):
    keys, inv = np.unique(np.asarray(states, dtype=float).reshape(len(states), -1), axis=0, return_inverse=True)
    return keys, inv.reshape(-1)


def fqe_estimate(transitions, pi_e, gamma: float = mdp.GAMMA, function_class: str = "linear", iters: int = 500,
                 tol: float = 1e-9, l2: float = 1e-3, B: int = 0, level: float = 0.95, seed: int = 0,
                 n_threads: int | None = 1) -> OpeEstimate:
    """Fitted-Q evaluation.

    Each iteration regresses y = r + gamma (1 - done) sum_a pi_e(a|s') Q(s', a)
    on (s, a).  ``function_class`` is ``"linear"`` (ridge on the shared
    feature map, 196 actions) or ``"tabular"`` (exact per-(s, a) means; any
    finite state coding and action count).  The estimate averages
    V(s_1) = sum_a pi_e(a|s_1) Q(s_1, a) over episodes.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    S = np.asarray(transitions.states, dtype=float)
    S2 = np.asarray(transitions.next_states, dtype=float)
    A = np.asarray(transitions.actions, dtype=np.int64)
    r = np.asarray(transitions.rewards, dtype=float)
    cont = gamma * (1.0 - np.asarray(transitions.dones, dtype=float))
    init = np.asarray(transitions.t) == 1
    P_next = pi_e.probs(S2)
    P_init = pi_e.probs(S[init])
    n_actions = P_next.shape[1]

    if function_class == "tabular":
        keys, inv = _tabular_keys(np.vstack([S, S2]))
        s_id, s2_id = inv[: len(S)], inv[len(S):]
        cell = s_id * n_actions + A
        counts = np.bincount(cell, minlength=len(keys) * n_actions)
        Q = np.zeros((len(keys), n_actions))

        def fit(y):
            sums = np.bincount(cell, weights=y, minlength=len(keys) * n_actions)
            return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0).reshape(len(keys), n_actions)

        def next_v(Q):
            return (P_next * Q[s2_id]).sum(axis=1)

        def on_data(Q):
            return Q[s_id, A]

        def init_v(Q):
            return (P_init * Q[s_id[init]]).sum(axis=1)
    elif function_class == "linear":
        if n_actions != mdp.N_ACTIONS:
            raise ValueError("linear FQE needs policies over the 196 actions")
        fmap = FeatureMap.fit(S)
        Xs, Xn, Xi = fmap.standardize(S), fmap.standardize(S2), fmap.standardize(S[init])
        Phi = fmap.design(Xs, A)
        gram = Phi.T @ Phi / len(S) + l2 * np.eye(fmap.dim)
        try:
            chol = cho_factor(gram)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(f"FQE regression failed at iteration 0: {exc}") from exc
        Q = np.zeros(fmap.dim)

        def fit(y):
            return cho_solve(chol, Phi.T @ y / len(S))

        def next_v(theta):
            return (P_next * fmap.q_all(theta, Xn)).sum(axis=1)

        def on_data(theta):
            return fmap.q_sa(theta, Xs, A)

        def init_v(theta):
            return (P_init * fmap.q_all(theta, Xi)).sum(axis=1)
    else:
        raise ValueError(f"unknown function class {function_class!r}")

    prev = on_data(Q)
    gap = np.inf
    k = 0
    for k in range(1, iters + 1):
        y = r + cont * next_v(Q)
        Q = fit(y)
        if not np.all(np.isfinite(Q)):
            raise RuntimeError(f"FQE regression failed at iteration {k}: non-finite coefficients")
        cur = on_data(Q)
        gap = float(np.max(np.abs(cur - prev))) if len(cur) else 0.0
        prev = cur
        if gap < tol:
            break
    v1 = init_v(Q)
    est = OpeEstimate("fqe", float(np.mean(v1)), n_episodes=int(init.sum()),
                      diagnostics={"iterations": k, "gap": gap, "function_class": function_class})
    if B:
        est.ci_low, est.ci_high = bootstrap_ci(v1, B, level, seed, n_threads)
        est.level = level
    return est


# -- matching ---------------------------------------------------------------------


def clinical_metrics(trajectories) -> ClinicalMetrics:
    if not trajectories:
        raise ValueError("no trajectories")
    term = np.array([tr.states[-1, SPO2_IDX] for tr in trajectories])
    first = np.array([tr.states[0, SPO2_IDX] for tr in trajectories])
    below = term < 95.0
    bins = np.vstack([tr.bins for tr in trajectories if len(tr.bins)])
    vt_aggr, fio2_aggr = mdp.aggressive_arrays(bins)
    return ClinicalMetrics(
        pct_terminal_spo2_above_95=float(100.0 * np.mean(~below)),
        mean_delta_spo2_among_below_95=float(np.mean(term[below] - first[below])) if below.any() else None,
        pct_steps_vt_aggressive=float(100.0 * vt_aggr.mean()),
        pct_steps_fio2_aggressive=float(100.0 * fio2_aggr.mean()),
    )


def matching_ope(policy, initial_states, horizons, model, reward_params: mdp.RewardParams | None = None,
                 seed: int = 0, episode_ids=None, B: int = 1000, level: float = 0.95, noise: bool = False,
                 n_threads: int | None = None):
    """Simulate ``policy`` from each evaluation episode's first state and score the rollouts.

    Returns (OpeEstimate, ClinicalMetrics, BatchResult).
    """
    rp = reward_params or mdp.RewardParams()
    res = batch_simulate(policy, initial_states, horizons, model, rp, seed, episode_ids, noise, n_threads)
    if not res.trajectories:
        raise RuntimeError("every simulated trajectory failed")
    returns = np.array([tr.discounted_return(rp.gamma) for tr in res.trajectories])
    est = OpeEstimate("matching", float(returns.mean()), n_episodes=len(returns),
                      diagnostics={"fallback_rate": res.fallback_rate, "failures": len(res.failures)})
    if B and len(returns) >= 2:
        est.ci_low, est.ci_high = bootstrap_ci(returns, B, level, seed, n_threads)
        est.level = level
    return est, clinical_metrics(res.trajectories), res
