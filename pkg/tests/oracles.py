"""Independent reference implementations used as test oracles."""

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from venteval import mdp

from venteval.schema import DYNAMIC_IDX, FEATURE_GROUPS, GROUP_ORDER, STATE_FEATURES


def kernel(u):
    return 0.75 * (1.0 - u * u) if abs(u) < 1.0 else 0.0


def nwe_bruteforce(states, bins, targets, bw, query_s, query_a):
    """Direct Nadaraya-Watson evaluation, one training row at a time.

    All features are z-scored with training statistics; distances are
    Euclidean within each feature group, over the action bin triple and
    over standardized z.  Returns (prediction in raw units, total mass).
    """
    n = len(states)
    obs = states[:, :15]
    mu, sd = obs.mean(axis=0), obs.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    zmu, zsd = states[:, 15].mean(), states[:, 15].std()
    zsd = zsd if zsd > 0 else 1.0
    ymu, ysd = targets.mean(axis=0), targets.std(axis=0)
    ysd = np.where(ysd > 0, ysd, 1.0)
    hs = {"hemodynamic": bw.h_s_hemo, "respiratory": bw.h_s_resp, "blood_gas": bw.h_s_blood, "misc": bw.h_s_misc}
    q = (query_s[:15] - mu) / sd
    qz = (query_s[15] - zmu) / zsd
    num = np.zeros(targets.shape[1])
    mass = 0.0
    for i in range(n):
        x = (obs[i] - mu) / sd
        w = 1.0
        for g in GROUP_ORDER:
            idx = [STATE_FEATURES.index(f) for f in FEATURE_GROUPS[g]]
            d = np.sqrt(sum((q[j] - x[j]) ** 2 for j in idx))
            w *= kernel(d / hs[g])
        da = np.sqrt(sum((float(query_a[c]) - float(bins[i, c])) ** 2 for c in range(3)))
        w *= kernel(da / bw.h_a)
        w *= kernel(abs(qz - (states[i, 15] - zmu) / zsd) / bw.h_z)
        mass += w
        num += w * (targets[i] - ymu) / ysd
    if mass + bw.lam == 0:
        return np.full(len(num), np.nan), mass
    return num / (mass + bw.lam) * ysd + ymu, mass


def random_nwe_instance(rng, n=None, spread=0.6):
    """Clustered random dataset so that queries have in-support neighbours."""
    from venteval.transition import BandwidthSet
    n = n or int(rng.integers(2, 101))
    centres = rng.standard_normal((3, 16))
    lab = rng.integers(0, 3, n)
    states = centres[lab] + spread * rng.standard_normal((n, 16))
    states[:, 15] = 1 / (1 + np.exp(-states[:, 15]))
    bins = np.column_stack([rng.integers(1, 8, n), rng.integers(1, 5, n), rng.integers(1, 8, n)])
    targets = rng.standard_normal((n, len(DYNAMIC_IDX))) * 5 + 50
    bw = BandwidthSet(*rng.uniform(1.5, 4.0, 4), rng.uniform(1.0, 3.0), rng.uniform(0.5, 2.5),
                      float(rng.choice([0.0, 1e-4, 1e-3, 1e-2])))
    k = int(rng.integers(n))
    qs = states[k] + 0.3 * rng.standard_normal(16) * (rng.random() < 0.8)
    qs[15] = np.clip(qs[15], 0.01, 0.99)
    qa = np.clip(bins[k] + rng.integers(-1, 2, 3), [1, 1, 1], [7, 4, 7])
    return states, bins, targets, bw, qs, qa


def bellman_value(P, R, pi, gamma):
    """Exact V solving V = R_pi + gamma P_pi V."""
    S = len(R)
    R_pi = np.array([sum(pi[s, a] * R[s, a] for a in range(R.shape[1])) for s in range(S)])
    P_pi = np.array([[sum(pi[s, a] * P[s, a, t] for a in range(R.shape[1])) for t in range(S)] for s in range(S)])
    return np.linalg.solve(np.eye(S) - gamma * P_pi, R_pi)


def empirical_mdp(s, a, r, s_next, n_states, n_actions):
    """Maximum-likelihood (P, R) from logged tabular transitions, by counting."""
    counts = np.zeros((n_states, n_actions, n_states))
    rsum = np.zeros((n_states, n_actions))
    for si, ai, ri, ti in zip(s, a, r, s_next):
        counts[si, ai, ti] += 1
        rsum[si, ai] += ri
    n = counts.sum(axis=2)
    if np.any(n == 0):
        raise ValueError("some (state, action) pair was never logged")
    return counts / n[:, :, None], rsum / n


def oracle_split(ts, n_features=2, min_leaf=5):
    """Exhaustive search with converged child Q = per-action mean reward (gamma = 0)."""
    S, a, r = ts.states, ts.actions, ts.rewards

    def leaf_max(mask):
        return max(r[mask & (a == k)].mean() for k in np.unique(a[mask]))

    best = (-np.inf, None, None)
    for f in range(n_features):
        u = np.unique(S[:, f])
        for thr in (u[:-1] + u[1:]) / 2:
            right = S[:, f] >= thr
            if right.sum() < min_leaf or (~right).sum() < min_leaf:
                continue
            g = (right.sum() * leaf_max(right) + (~right).sum() * leaf_max(~right)) / len(r)
            if g > best[0]:
                best = (g, f, thr)
    return best


def cq_bandit_oracle(covered, alpha, l2):
    """Optimum of the penalized objective on the single-state bandit.

    The state block is zero after standardization, so Q(a) is the one-hot
    weight; the uncovered actions share one value by symmetry.  Returns the
    covered actions' Q followed by the shared uncovered value.
    """
    acts = np.array(list(covered))
    r = np.array([covered[a] for a in acts])
    k = len(acts)
    f = np.full(k, 1 / k)
    n_un = mdp.N_ACTIONS - k

    def fun(v):
        q, u = v[:k], v[k]
        lse = logsumexp(np.r_[q, u], b=np.r_[np.ones(k), n_un])
        return f @ (0.5 * (q - r) ** 2 - alpha * q) + alpha * lse + 0.5 * l2 * (q @ q + n_un * u * u)

    return minimize(fun, np.zeros(k + 1), method="BFGS", options={"gtol": 1e-12}).x
