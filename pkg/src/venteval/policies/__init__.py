"""Policy families: behaviour cloning, tree Q-learning and conservative fitted-Q."""

from .base import FixedPolicy, Policy, TablePolicy, sample_from
from .bc import BcPolicy, bc_probs, train_bc
from .conservative_q import ConservativeQ, DivergenceError, greedy_action, train_conservative_q, train_fqi
from .features import FeatureMap
from .cqi import CqiTree, cqi_act, export_graph, export_text, export_tree, import_text, train_cqi


def policy_from_dict(d):
    kind = d["kind"]
    if kind == "bc":
        return BcPolicy.from_dict(d)
    if kind == "cqi":
        return CqiTree.from_dict(d)
    if kind == "cq":
        return ConservativeQ.from_dict(d)
    if kind == "fixed":
        return FixedPolicy(d["action"])
    if kind == "table":
        return TablePolicy(d["probs"])
    raise ValueError(f"unknown policy kind {kind!r}")


__all__ = [
    "BcPolicy", "ConservativeQ", "CqiTree", "DivergenceError", "FeatureMap", "FixedPolicy", "Policy", "TablePolicy",
    "bc_probs", "cqi_act", "export_graph", "export_text", "export_tree", "greedy_action", "import_text",
    "policy_from_dict", "sample_from", "train_bc", "train_conservative_q", "train_cqi", "train_fqi",
]
