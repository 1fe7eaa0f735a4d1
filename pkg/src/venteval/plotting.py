"""Figure rendering for CLI reports (Agg backend, PNG, no timestamps)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from . import mdp  # noqa: E402

_PNG_META = {"Software": None}
_N_BINS = (mdp.N_VT, mdp.N_PEEP, mdp.N_FIO2)
_SETTINGS = (("vt_bin", "Vt_set bin"), ("peep_bin", "PEEP bin"), ("fio2_bin", "FiO2 bin"))


def estimates_frame(estimates) -> pd.DataFrame:
    """One row per (label, OpeEstimate) pair, shaped for :func:`plot_estimates`."""
    rows = []
    for label, est in estimates:
        rows.append({"policy": label, "method": est.method, "value": est.value, "ci_low": est.ci_low,
                     "ci_high": est.ci_high, "level": est.level, "n_episodes": est.n_episodes})
    return pd.DataFrame(rows, columns=["policy", "method", "value", "ci_low", "ci_high", "level", "n_episodes"])


def action_distribution_frame(bins_by_policy: dict) -> pd.DataFrame:
    """Per-setting bin frequencies (percent of steps) for each policy.

    ``bins_by_policy`` maps a label to an (n, 3) array of action bins.
    """
    rows = []
    for label, bins in bins_by_policy.items():
        bins = np.asarray(bins, dtype=int).reshape(-1, 3)
        for j, (name, _) in enumerate(_SETTINGS):
            counts = np.bincount(bins[:, j], minlength=_N_BINS[j] + 1)[1:]
            pct = 100.0 * counts / max(len(bins), 1)
            for b, (c, p) in enumerate(zip(counts, pct), start=1):
                rows.append({"policy": label, "setting": name, "bin": b, "count": int(c), "percent": float(p)})
    return pd.DataFrame(rows, columns=["policy", "setting", "bin", "count", "percent"])


def plot_estimates(df: pd.DataFrame, path) -> None:
    """Point estimates with interval bars, one marker per policy and method."""
    fig, ax = plt.subplots(figsize=(6.0, 0.5 + 0.45 * max(len(df), 1)))
    y = np.arange(len(df))[::-1]
    has_ci = df["ci_low"].notna() & df["ci_high"].notna()
    lo = np.where(has_ci, df["value"] - df["ci_low"].fillna(0), 0.0)
    hi = np.where(has_ci, df["ci_high"].fillna(0) - df["value"], 0.0)
    ax.errorbar(df["value"], y, xerr=np.vstack([lo, hi]), fmt="o", color="k", ecolor="0.4", capsize=3)
    ax.set_yticks(y)
    ax.set_yticklabels([f"{p} ({m})" for p, m in zip(df["policy"], df["method"])])
    ax.set_xlabel("estimated value")
    ax.grid(axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_action_distribution(df: pd.DataFrame, path) -> None:
    """Grouped bar chart of bin frequencies, one panel per ventilator setting."""
    labels = list(dict.fromkeys(df["policy"]))
    fig, axes = plt.subplots(1, 3, figsize=(11.0, 3.2), sharey=True)
    width = 0.8 / max(len(labels), 1)
    for ax, (name, title) in zip(axes, _SETTINGS):
        sub = df[df["setting"] == name]
        for k, label in enumerate(labels):
            part = sub[sub["policy"] == label]
            ax.bar(part["bin"] + (k - (len(labels) - 1) / 2) * width, part["percent"], width, label=label)
        ax.set_title(title)
        ax.set_xticks(sorted(sub["bin"].unique()))
    axes[0].set_ylabel("% of steps")
    axes[-1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
