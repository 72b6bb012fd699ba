"""Top-k MIL loss, dynamics ranking loss, dynamics alignment loss and the
weighted objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core_math as cm
from .scorer import EmptyDynamicsError, score_dynamics


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    zeta: float = 0.0
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.zeta < 0:
            raise ValueError("lambda1, lambda2 and zeta must be non-negative")


@dataclass
class BagOutput:
    """Model outputs for one bag: snippet scores and robust features."""

    scores: object
    features: object
    label: int


@dataclass
class BagBatch:
    positives: list[BagOutput] = field(default_factory=list)
    negatives: list[BagOutput] = field(default_factory=list)

    @property
    def bags(self) -> list[BagOutput]:
        return self.positives + self.negatives

    def __len__(self):
        return len(self.positives) + len(self.negatives)


def topk_count(t_len: int, label: int) -> int:
    """``floor(T / 16 + 1)`` for abnormal bags (capped at T), 1 for normal."""
    if t_len < 1:
        raise ValueError(f"t_len must be >= 1, got {t_len}")
    if not label:
        return 1
    return min(t_len // 16 + 1, t_len)


def _topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    # largest first; stable sort keeps the earlier index on ties
    return np.argsort(-values, kind="stable")[:k]


def topk_mean(v, k: int):
    idx = _topk_indices(cm._value(v), k)
    return cm.mean(v[idx])


def bag_probability(scores, label: int):
    """Video-level score: mean of the top-k snippet scores."""
    n = cm._value(scores).shape[0]
    return topk_mean(scores, topk_count(n, label))


def mil_loss(batch: BagBatch, literal: bool = False):
    """Binary cross-entropy on top-k bag probabilities, averaged over bags.

    ``literal=True`` keeps only the ``-y log p`` term, which ignores normal bags.
    """
    bags = batch.bags
    if not bags:
        raise ValueError("mil_loss needs a non-empty batch")
    terms = []
    for bag in bags:
        p = bag_probability(bag.scores, bag.label)
        if bag.label:
            terms.append(cm.log(p))
        elif not literal:
            terms.append(cm.log(cm.sub(1.0, p)))
    if not terms:
        return np.float64(0.0)
    acc = terms[0]
    for term in terms[1:]:
        acc = cm.add(acc, term)
    return cm.mul(acc, -1.0 / len(bags))


def dynamics_accumulation(delta_s, label: int):
    """Mean of the squared top-k score dynamics of one bag."""
    n = cm._value(delta_s).shape[0]
    if n == 0:
        raise EmptyDynamicsError("dynamics_accumulation needs at least one entry")
    k = min(topk_count(n + 1, label), n)
    return cm.mean(cm.square(delta_s[_topk_indices(cm._value(delta_s), k)]))


def dr_loss(e_pos, e_neg, zeta: float = 0.0):
    """Hinge ``max(0, zeta - e_pos + e_neg)``."""
    return cm.relu(cm.add(cm.sub(zeta, e_pos), e_neg))


def batch_dr_loss(batch: BagBatch, zeta: float = 0.0):
    """DR hinge averaged over positive/negative pairs matched by position."""
    pairs = list(zip(batch.positives, batch.negatives))
    if not pairs:
        return np.float64(0.0)
    hinges = [
        cm.reshape(
            dr_loss(
                dynamics_accumulation(score_dynamics(pos.scores), 1),
                dynamics_accumulation(score_dynamics(neg.scores), 0),
                zeta,
            ),
            (1,),
        )
        for pos, neg in pairs
    ]
    return cm.mean(cm.concat(hinges))


def feature_dynamics(xf):
    """Cosine distance between consecutive feature rows."""
    return cm.consecutive_cosine_distance(xf)


def bag_alignment(delta_s, delta_f, epsilon: float):
    """``mean_t -delta_s[t] * log(delta_f[t] + eps)`` for one bag."""
    ns, nf = cm._value(delta_s).shape, cm._value(delta_f).shape
    if ns != nf:
        raise ValueError(f"dynamics lengths differ: scores {ns}, features {nf}")
    return cm.mul(cm.mean(cm.mul(delta_s, cm.log(cm.add(delta_f, epsilon)))), -1.0)


def da_loss(batch: BagBatch, epsilon: float = 1e-7):
    """Alignment loss averaged over time within a bag, then over bags."""
    bags = batch.bags
    if not bags:
        raise ValueError("da_loss needs a non-empty batch")
    terms = [
        cm.reshape(bag_alignment(score_dynamics(b.scores), feature_dynamics(b.features), epsilon), (1,))
        for b in bags
    ]
    return cm.mean(cm.concat(terms))


def total_loss(batch: BagBatch, weights: LossWeights, literal_mil: bool = False):
    """Weighted objective. Returns ``(loss, components)`` where components
    holds plain floats for ``mil``, ``dr`` and ``da``.

    A component whose weight is zero is skipped and reported as exactly 0.
    """
    mil = mil_loss(batch, literal=literal_mil)
    loss = mil
    parts = {"mil": float(cm._value(mil)), "dr": 0.0, "da": 0.0}
    if weights.lambda1 != 0.0:
        dr = batch_dr_loss(batch, weights.zeta)
        parts["dr"] = float(cm._value(dr))
        loss = cm.add(loss, cm.mul(dr, weights.lambda1))
    if weights.lambda2 != 0.0:
        da = da_loss(batch, weights.epsilon)
        parts["da"] = float(cm._value(da))
        loss = cm.add(loss, cm.mul(da, weights.lambda2))
    return loss, parts
