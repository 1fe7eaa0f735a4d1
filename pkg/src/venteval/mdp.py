"""Action discretization and the clinically penalized reward."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

BIN_TABLE_VERSION = "1"

# (lower edges, closed upper bound of the last bin or None for unbounded)
VT_EDGES = (0.0, 3.9, 5.37, 6.55, 7.74, 9.12, 11.11)
PEEP_EDGES = (0.0, 7.0, 11.0, 16.0)
FIO2_EDGES = (0.0, 0.36, 0.45, 0.55, 0.65, 0.76, 0.89)
FIO2_MAX = 1.0

N_VT, N_PEEP, N_FIO2 = len(VT_EDGES), len(PEEP_EDGES), len(FIO2_EDGES)
N_ACTIONS = N_VT * N_PEEP * N_FIO2

VT_AGGRESSIVE_BIN = 6
FIO2_AGGRESSIVE_BIN = 4

GAMMA = 0.99
# penalty pair chosen from PENALTY_GRID (alpha for Vt_set, beta for FiO2)
SELECTED_PENALTIES = (0.375, 0.75)
PENALTY_GRID = tuple(3 / 2**k for k in range(5))
CQL_ALPHA_GRID = (4.0, 2.0, 1.0, 0.5, 0.25)


class ActionTriple(NamedTuple):
    vt_bin: int
    peep_bin: int
    fio2_bin: int

    @property
    def index(self) -> int:
        return action_index(self)


@dataclass(frozen=True)
class RewardParams:
    alpha: float = 0.0
    beta: float = 0.0
    spo2_cap: float = 95.0
    gamma: float = GAMMA

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("penalty weights must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


def _check_triple(a):
    vt, peep, fio2 = a
    if not (1 <= vt <= N_VT and 1 <= peep <= N_PEEP and 1 <= fio2 <= N_FIO2):
        raise ValueError(f"action bins out of range: {tuple(a)}")


def action_index(a) -> int:
    """Flat index in [0, 196) with FiO2 varying fastest."""
    _check_triple(a)
    vt, peep, fio2 = a
    return (vt - 1) * N_PEEP * N_FIO2 + (peep - 1) * N_FIO2 + (fio2 - 1)


def action_from_index(idx: int) -> ActionTriple:
    if not 0 <= idx < N_ACTIONS:
        raise ValueError(f"action index out of range: {idx}")
    vt, rest = divmod(int(idx), N_PEEP * N_FIO2)
    peep, fio2 = divmod(rest, N_FIO2)
    return ActionTriple(vt + 1, peep + 1, fio2 + 1)


# (196, 3) table of bin indices, row i = action i
ACTION_BINS = np.array([tuple(action_from_index(i)) for i in range(N_ACTIONS)], dtype=np.int64)


def indices_from_bins(bins) -> np.ndarray:
    bins = np.asarray(bins, dtype=np.int64)
    return (bins[..., 0] - 1) * N_PEEP * N_FIO2 + (bins[..., 1] - 1) * N_FIO2 + (bins[..., 2] - 1)


def _bin(value, edges, name, upper=None):
    value = np.asarray(value, dtype=float)
    if np.any(~np.isfinite(value)):
        raise ValueError(f"{name} must be finite")
    if np.any(value < 0):
        raise ValueError(f"{name} must be non-negative, got {value}")
    if upper is not None and np.any(value > upper):
        raise ValueError(f"{name} must be <= {upper}, got {value}")
    return np.searchsorted(np.asarray(edges), value, side="right").astype(np.int64)


def discretize_arrays(vt, peep, fio2) -> np.ndarray:
    """Vectorized binning; returns an (n, 3) array of 1-based bins."""
    return np.stack(
        [
            _bin(vt, VT_EDGES, "vt_set"),
            _bin(peep, PEEP_EDGES, "peep"),
            _bin(fio2, FIO2_EDGES, "fio2", upper=FIO2_MAX),
        ],
        axis=-1,
    )


def discretize_action(vt_raw: float, peep_raw: float, fio2_raw: float) -> ActionTriple:
    bins = discretize_arrays(vt_raw, peep_raw, fio2_raw)
    return ActionTriple(*(int(b) for b in bins))


def _representatives(edges, upper):
    reps = []
    for k, lo in enumerate(edges):
        hi = edges[k + 1] if k + 1 < len(edges) else upper
        reps.append(lo * 1.1 if hi is None else (lo + hi) / 2)
    return tuple(reps)


VT_REPS = _representatives(VT_EDGES, None)
PEEP_REPS = _representatives(PEEP_EDGES, None)
FIO2_REPS = _representatives(FIO2_EDGES, FIO2_MAX)


def representative_action(a) -> tuple[float, float, float]:
    """Continuous (vt mL/kg, peep cmH2O, fio2) value inside each bin."""
    _check_triple(a)
    vt, peep, fio2 = a
    return VT_REPS[vt - 1], PEEP_REPS[peep - 1], FIO2_REPS[fio2 - 1]


def is_aggressive(a) -> tuple[bool, bool]:
    _check_triple(a)
    return a[0] >= VT_AGGRESSIVE_BIN, a[2] >= FIO2_AGGRESSIVE_BIN


def aggressive_arrays(bins) -> tuple[np.ndarray, np.ndarray]:
    bins = np.asarray(bins)
    return bins[..., 0] >= VT_AGGRESSIVE_BIN, bins[..., 2] >= FIO2_AGGRESSIVE_BIN


def reward(s_t, s_next, a, p: RewardParams, spo2_idx: int | None = None) -> float:
    """Reward for one step.

    ``s_t`` and ``s_next`` are state vectors (SpO2 read at ``spo2_idx``) or,
    when ``spo2_idx`` is None, the SpO2 values themselves.
    """
    if spo2_idx is None:
        spo2_t, spo2_next = float(s_t), float(s_next)
    else:
        spo2_t, spo2_next = float(s_t[spo2_idx]), float(s_next[spo2_idx])
    vt_aggr, fio2_aggr = is_aggressive(a)
    r_spo = spo2_next - spo2_t if (spo2_next < p.spo2_cap and spo2_t < p.spo2_cap) else 0.0
    r_a = 0.0
    if vt_aggr:
        r_a -= p.alpha
    if fio2_aggr:
        r_a -= p.beta
    return r_spo + r_a


def reward_arrays(spo2_t, spo2_next, bins, p: RewardParams) -> np.ndarray:
    spo2_t = np.asarray(spo2_t, dtype=float)
    spo2_next = np.asarray(spo2_next, dtype=float)
    below = (spo2_t < p.spo2_cap) & (spo2_next < p.spo2_cap)
    r_spo = np.where(below, spo2_next - spo2_t, 0.0)
    vt_aggr, fio2_aggr = aggressive_arrays(bins)
    r_a = np.zeros_like(r_spo)
    r_a = np.where(vt_aggr, r_a - p.alpha, r_a)
    r_a = np.where(fio2_aggr, r_a - p.beta, r_a)
    return r_spo + r_a


def discount_factors(gamma: float, horizon: int) -> np.ndarray:
    """Weights gamma**(t-1) for t = 1..horizon."""
    return gamma ** np.arange(horizon, dtype=float)


def _fmt_edge(x):
    return f"{x:g}"


def bin_table_rows() -> list[tuple[str, str, str, str]]:
    """Rows of the binning table exactly as printed by ``venteval bins``."""

    def interval(edges, k, upper, closed_top):
        lo = edges[k]
        if k + 1 < len(edges):
            return f"[{_fmt_edge(lo)}, {_fmt_edge(edges[k + 1])})"
        if upper is None:
            return f"[{_fmt_edge(lo)}, inf)"
        return f"[{_fmt_edge(lo)}, {_fmt_edge(upper)}]" if closed_top else f"[{_fmt_edge(lo)}, {_fmt_edge(upper)})"

    rows = []
    for k in range(max(N_VT, N_PEEP, N_FIO2)):
        vt = interval(VT_EDGES, k, None, False) if k < N_VT else ""
        peep = interval(PEEP_EDGES, k, None, False) if k < N_PEEP else ""
        fio2 = interval(FIO2_EDGES, k, FIO2_MAX, True) if k < N_FIO2 else ""
        rows.append((str(k + 1), vt, peep, fio2))
    return rows


def format_bin_table() -> str:
    lines = ["bin,vt_set,peep,fio2"]
    lines += [",".join(f'"{c}"' if "," in c else c for c in row) for row in bin_table_rows()]
    return "\n".join(lines) + "\n"
