#!/usr/bin/env python3
"""
Loss components for test-time adaptation.

Scalar helpers (entropy, complementary distribution, mutual-information-sharing
loss, sample weight) work on plain probability vectors. The *_node builders
emit the same quantities into a ComputeGraph so they can be differentiated,
and total_loss assembles the per-step objective:

    sum over selected x of  alpha(x) * (Ent(x) + lambda_eff * L_mis(x))
    [+ omega * sum_c q_c ln q_c   when the balance term is enabled]

alpha and the selection mask enter the graph as constants.
"""

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from numkit import LOG_EPS, ComputeGraph

PROB_ATOL = 1e-9

SCHEDULE_FAMILIES = ("linear", "exponential", "logarithmic")
QUANTILE_MODES = ("minmax-interp", "order-stat")
ADAPT_MODES = ("weak", "wild")


@dataclass
class AdaptConfig:
    """Hyperparameters of one adaptation run.

    gamma_m and ent0 default to None, meaning 0.4 * ln C; t0 defaults to None,
    meaning floor(iter / 2). balance_weight has no published value; 1.0 is a
    placeholder.
    """
    gamma_m: Optional[float] = None
    gamma_u: float = math.exp(-1.0)
    mu: float = 1.0
    lam: float = 5.0
    beta: float = 0.6
    ent0: Optional[float] = None
    t0: Optional[int] = None
    schedule: str = "linear"
    quantile_mode: str = "minmax-interp"
    learning_rate: float = 1e-4
    batch_size: int = 16
    iterations: Optional[int] = None
    balance_term: bool = False
    balance_weight: float = 1.0
    modality_order: Tuple[str, str] = ("u1", "u2")
    use_iqr: bool = True
    use_ua: bool = True
    use_mis: bool = True

    def resolve(self, num_classes: int, iterations: int) -> "AdaptConfig":
        """Fill the class- and horizon-dependent defaults and validate."""
        default_threshold = 0.4 * math.log(num_classes)
        resolved = replace(
            self,
            gamma_m=default_threshold if self.gamma_m is None else float(self.gamma_m),
            ent0=default_threshold if self.ent0 is None else float(self.ent0),
            t0=iterations // 2 if self.t0 is None else int(self.t0),
            iterations=iterations,
            modality_order=tuple(self.modality_order),
        )
        resolved.validate()
        return resolved

    def validate(self):
        for name in ("gamma_m", "gamma_u", "lam", "ent0"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.t0 is not None and self.iterations is not None and not 0 <= self.t0 <= self.iterations:
            raise ValueError(f"t0 must lie in [0, {self.iterations}], got {self.t0}")
        if self.schedule not in SCHEDULE_FAMILIES:
            raise ValueError(f"schedule must be one of {SCHEDULE_FAMILIES}, got {self.schedule!r}")
        if self.quantile_mode not in QUANTILE_MODES:
            raise ValueError(f"quantile_mode must be one of {QUANTILE_MODES}, got {self.quantile_mode!r}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if sorted(self.modality_order) != ["u1", "u2"]:
            raise ValueError(f"modality_order must order u1 and u2, got {self.modality_order}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["modality_order"] = list(self.modality_order)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "AdaptConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown adapt keys: {sorted(unknown)}")
        data = dict(data)
        if "modality_order" in data:
            data["modality_order"] = tuple(data["modality_order"])
        return cls(**data)


# -----------------------------------------------------------------------------
# Scalar forms
# -----------------------------------------------------------------------------


def as_prob_dist(p) -> np.ndarray:
    """Validate a probability vector: entries >= 0, sum within 1e-9 of 1."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValueError(f"probability vector must be 1-D and non-empty, got shape {p.shape}")
    if (p < 0).any() or abs(p.sum() - 1.0) > PROB_ATOL:
        raise ValueError(f"not a probability vector (min {p.min()}, sum {p.sum()})")
    return p


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # 0 * log 0 = 0
    return np.where(x > 0, x * np.log(np.maximum(y, LOG_EPS)), 0.0)


def entropy(p) -> float:
    p = as_prob_dist(p)
    return float(-_xlogy(p, p).sum())


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float((_xlogy(p, p) - _xlogy(p, q)).sum())


def complementary(dists: Sequence, i: int) -> np.ndarray:
    """Average of every distribution except the i-th."""
    if len(dists) < 2:
        raise ValueError(f"complementary distribution needs at least 2 modalities, got {len(dists)}")
    if not 0 <= i < len(dists):
        raise IndexError(f"modality index {i} out of range for {len(dists)} distributions")
    stacked = np.stack([as_prob_dist(p) for p in dists])
    if len(dists) == 2:
        return stacked[1 - i].copy()
    return (stacked.sum(axis=0) - stacked[i]) / (len(dists) - 1)


def mis_loss(p_u1, p_u2, p_m) -> float:
    p_u1, p_u2, p_m = as_prob_dist(p_u1), as_prob_dist(p_u2), as_prob_dist(p_m)
    target_u1 = 0.5 * (complementary([p_u1, p_u2], 0) + p_m)
    target_u2 = 0.5 * (complementary([p_u1, p_u2], 1) + p_m)
    return kl_divergence(p_u1, target_u1) + kl_divergence(p_u2, target_u2)


def sample_weight(ent, ent0: float):
    """exp(Ent0 - Ent); used as a constant weight."""
    ent = np.asarray(ent, dtype=np.float64)
    if (ent < 0).any():
        raise ValueError("entropy must be >= 0")
    weight = np.exp(ent0 - ent)
    return float(weight) if weight.ndim == 0 else weight


def row_entropies(probs: np.ndarray) -> np.ndarray:
    """Per-row entropy of a (n, C) probability matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    return -_xlogy(probs, probs).sum(axis=-1)


# -----------------------------------------------------------------------------
# Graph forms
# -----------------------------------------------------------------------------


def entropy_node(graph: ComputeGraph, p: int) -> int:
    """Per-row entropy -sum_c p_c log p_c (log clamped at LOG_EPS)."""
    return graph.scale(graph.sum(graph.mul(p, graph.log(p)), axis=-1), -1.0)


def kl_node(graph: ComputeGraph, p: int, q: int) -> int:
    """Per-row D_KL(p || q)."""
    return graph.sum(graph.mul(p, graph.sub(graph.log(p), graph.log(q))), axis=-1)


def mis_node(graph: ComputeGraph, p_u1: int, p_u2: int, p_m: int) -> int:
    """Per-row mutual-information-sharing loss for two modalities."""
    target_u1 = graph.scale(graph.add(p_u2, p_m), 0.5)
    target_u2 = graph.scale(graph.add(p_u1, p_m), 0.5)
    return graph.add(kl_node(graph, p_u1, target_u1), kl_node(graph, p_u2, target_u2))


@dataclass
class LossTerms:
    total: int
    components: Dict[str, int] = field(default_factory=dict)
    mis_weight: float = 0.0


def mis_weight(config: AdaptConfig, t: int, mode: str) -> float:
    """lambda if weak mode or (wild mode and t < t0), else 0."""
    if mode not in ADAPT_MODES:
        raise ValueError(f"mode must be one of {ADAPT_MODES}, got {mode!r}")
    if not config.use_mis:
        return 0.0
    if mode == "weak" or t < config.t0:
        return float(config.lam)
    return 0.0


def total_loss(
    graph: ComputeGraph,
    nodes: Dict[str, int],
    mask: np.ndarray,
    config: AdaptConfig,
    t: int,
    mode: str,
    ent_m: Optional[np.ndarray] = None,
) -> LossTerms:
    """Build the step objective over selected rows; mask and alpha are constants.

    nodes must hold 'ent_m', 'p_m', 'p_u1', 'p_u2' of the traced batch.
    ent_m, when given, supplies the already-evaluated multimodal entropies for
    the weights; otherwise they are read from the graph.
    """
    mask = np.asarray(mask, dtype=bool)
    lam_eff = mis_weight(config, t, mode)
    if not mask.any():
        zero = graph.constant(0.0)
        return LossTerms(total=zero, components={"entropy": zero}, mis_weight=lam_eff)

    if ent_m is None:
        ent_m = graph.value(nodes["ent_m"])
    weights = np.where(mask, sample_weight(np.maximum(ent_m, 0.0), config.ent0), 0.0)
    weight_node = graph.constant(weights)

    components = {"entropy": graph.sum(graph.mul(weight_node, nodes["ent_m"]))}
    per_sample = nodes["ent_m"]
    if lam_eff > 0.0:
        mis_rows = mis_node(graph, nodes["p_u1"], nodes["p_u2"], nodes["p_m"])
        components["mis"] = graph.scale(graph.sum(graph.mul(weight_node, mis_rows)), lam_eff)
        per_sample = graph.add(per_sample, graph.scale(mis_rows, lam_eff))
    total = graph.sum(graph.mul(weight_node, per_sample))

    if config.balance_term:
        n_classes = graph.value(nodes["p_m"]).shape[-1]
        row_share = mask.astype(np.float64) / mask.sum()
        share = graph.constant(np.repeat(row_share[:, None], n_classes, axis=1))
        q = graph.sum(graph.mul(share, nodes["p_m"]), axis=0)
        neg_entropy = graph.sum(graph.mul(q, graph.log(q)))
        components["balance"] = graph.scale(neg_entropy, config.balance_weight)
        total = graph.add(total, components["balance"])

    return LossTerms(total=total, components=components, mis_weight=lam_eff)
