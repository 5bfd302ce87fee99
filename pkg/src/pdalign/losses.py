"""The five objective terms and their weighted combination.

Names follow the report fields: ``l_ce``, ``l_comp``, ``l_inter``, ``l_intra``
and ``l_ent``.

Every function takes :class:`~pdalign.autograd.Tensor` inputs and returns a
scalar tensor so gradients flow back to the network. Target arrays
(one-hot labels, soft pseudo-labels) are plain numpy constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations
from typing import Mapping

import numpy as np

from .autograd import Tensor, as_tensor, pairwise_dist, where
from .errors import DimensionError, DomainError, ValidityError

PROB_FLOOR = 1e-12
COMP_GUARD = 1e-8

TERM_NAMES = ("l_ce", "l_comp", "l_inter", "l_intra", "l_ent")


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.7   # focal exponent on (1 - p_g)
    eta: float = 6.0     # complement-entropy weight
    alpha: float = 0.4   # target/target separation weight
    beta: float = 1.0    # source/target separation weight
    delta: float = 1.5   # intra-class compactness weight
    zeta: float = 3.0    # threshold regulator
    omega: float = 0.1   # prototype EMA rate

    def __post_init__(self):
        for name in ("gamma", "eta", "alpha", "beta", "delta"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.zeta > 0:
            raise ValueError(f"zeta must be > 0, got {self.zeta}")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must be in [0, 1], got {self.omega}")


@dataclass
class LabeledBatch:
    """Predicted probabilities paired with target distributions (one row each)."""

    preds: Tensor
    targets: np.ndarray

    def __post_init__(self):
        self.preds = as_tensor(self.preds)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.preds.shape != self.targets.shape:
            raise DimensionError(f"preds {self.preds.shape} vs targets {self.targets.shape}")
        if np.any(self.targets < 0) or not np.allclose(self.targets.sum(axis=1), 1.0, atol=1e-9):
            raise ValidityError("targets must be probability vectors")

    def __len__(self) -> int:
        return self.targets.shape[0]

    @classmethod
    def from_labels(cls, preds, labels, n_classes: int) -> "LabeledBatch":
        return cls(preds, np.eye(n_classes)[np.asarray(labels, dtype=int)])


def _nonempty(batch: LabeledBatch | None) -> bool:
    return batch is not None and len(batch) > 0


def _cross_entropy(batch: LabeledBatch) -> Tensor:
    logp = batch.preds.clamp_min(PROB_FLOOR).log()
    return -(logp * batch.targets).sum(axis=1).mean()


def ce_loss(source: LabeledBatch, confident_target: LabeledBatch | None = None) -> Tensor:
    """Mean source cross-entropy plus mean soft-label cross-entropy on the
    confident target batch when it is nonempty."""
    if not _nonempty(source):
        raise DomainError("ce_loss needs a nonempty source batch")
    loss = _cross_entropy(source)
    if _nonempty(confident_target):
        loss = loss + _cross_entropy(confident_target)
    return loss


def comp_per_sample(preds: Tensor, truth: np.ndarray, gamma: float) -> Tensor:
    """Complement entropy term for each row of ``preds`` given ground-truth
    indices ``truth``. Rows with ``1 - p_g < 1e-8`` contribute exactly 0."""
    preds = as_tensor(preds)
    truth = np.asarray(truth, dtype=int)
    n, k = preds.shape
    rows = np.arange(n)
    comp_mask = np.ones((n, k))
    comp_mask[rows, truth] = 0.0
    rest = 1.0 - preds[rows, truth]
    live = rest.data >= COMP_GUARD
    safe_rest = where(live, rest, 1.0)
    ratio = (preds * comp_mask) / safe_rest.reshape(n, 1)
    ent = (ratio * ratio.clamp_min(PROB_FLOOR).log()).sum(axis=1)
    return where(live, (safe_rest**gamma) * ent, 0.0)


def comp_sample(pred, target, gamma: float) -> float:
    """Complement entropy of one prediction; ``target`` may be a one-hot or
    soft label (its argmax is the ground truth) or an integer index."""
    pred = np.asarray(pred, dtype=np.float64)[None, :]
    g = int(target) if np.ndim(target) == 0 else int(np.argmax(target))
    return comp_per_sample(Tensor(pred), np.array([g]), gamma).item()


def comp_loss(source: LabeledBatch, confident_target: LabeledBatch | None,
              gamma: float, n_classes: int) -> Tensor:
    if n_classes < 2:
        raise DomainError("comp_loss needs at least two classes")
    if not _nonempty(source):
        raise DomainError("comp_loss needs a nonempty source batch")
    total = comp_per_sample(source.preds, source.targets.argmax(axis=1), gamma).mean()
    if _nonempty(confident_target):
        total = total + comp_per_sample(
            confident_target.preds, confident_target.targets.argmax(axis=1), gamma).mean()
    return total * (1.0 / (n_classes - 1))


def _check_set(x: Tensor, what: str) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DomainError(f"{what} must be a nonempty (n, d) point set, got shape {x.shape}")
    return x


def d_e(set_a, set_b) -> Tensor:
    """Euclidean distance between the means of two point sets."""
    a, b = _check_set(set_a, "set_a"), _check_set(set_b, "set_b")
    return (a.mean(axis=0) - b.mean(axis=0)).norm()


def d_h(set_a, set_b) -> Tensor:
    """Average Hausdorff distance with L2 ground metric."""
    a, b = _check_set(set_a, "set_a"), _check_set(set_b, "set_b")
    dist = pairwise_dist(a, b)
    return 0.5 * (dist.min(axis=1).mean() + dist.min(axis=0).mean())


def inter_loss(source_by_class: Mapping[int, Tensor], target_by_class: Mapping[int, Tensor],
               alpha: float, beta: float, skip_missing_source: bool = False) -> Tensor:
    """Inter-class separation over the labels present in ``target_by_class``.

    The alpha term sums ``d_e + d_h`` over ordered pairs of distinct target
    classes; the beta term over (source class k, target class k') pairs.
    Both are normalized by ``K(K-1)`` with ``K`` the number of target
    classes. With ``skip_missing_source`` a label absent from the source map
    drops its beta pairs instead of raising.
    """
    labels = sorted(target_by_class)
    k_tau = len(labels)
    if k_tau < 2 or (alpha == 0 and beta == 0):
        return Tensor(0.0)
    missing = [k for k in labels if k not in source_by_class]
    if missing and not skip_missing_source:
        raise DomainError(f"source sets missing for labels {missing}")
    norm = 1.0 / (k_tau * (k_tau - 1))
    total = Tensor(0.0)
    if alpha:
        within = Tensor(0.0)
        for i, k in enumerate(labels):
            for kp in labels[i + 1:]:
                a, b = target_by_class[k], target_by_class[kp]
                within = within + d_e(a, b) + d_h(a, b)
        total = total + within * (2.0 * alpha * norm)
    if beta:
        cross = Tensor(0.0)
        for k, kp in permutations(labels, 2):
            if k not in source_by_class:
                continue
            a, b = source_by_class[k], target_by_class[kp]
            cross = cross + d_e(a, b) + d_h(a, b)
        total = total + cross * (beta * norm)
    return total


def intra_loss(merged_by_class: Mapping[int, Tensor], n_classes: int) -> Tensor:
    """Mean pairwise distance within each class, averaged over ``n_classes``.

    Classes with fewer than two points contribute 0; absent classes count
    toward the ``1/n_classes`` normalizer.
    """
    total = Tensor(0.0)
    for pts in merged_by_class.values():
        pts = as_tensor(pts)
        n = pts.shape[0]
        if n < 2:
            continue
        total = total + pairwise_dist(pts, pts).sum() * (1.0 / (n * (n - 1)))
    return total * (1.0 / n_classes)


def ent_loss(target_preds) -> Tensor:
    p = as_tensor(target_preds)
    if p.ndim != 2 or p.shape[0] == 0:
        raise DomainError("ent_loss needs a nonempty batch")
    return -(p * p.clamp_min(PROB_FLOOR).log()).sum(axis=1).mean()


def total_objective(terms: Mapping[str, Tensor | float], eta: float, delta: float) -> Tensor:
    """``ce + eta*comp - inter + delta*intra + ent``; the inter term is maximized."""
    vals = {}
    for name in TERM_NAMES:
        t = as_tensor(terms.get(name, 0.0))
        if not t.is_finite():
            raise ValidityError(f"loss term {name} is not finite: {t.data}")
        vals[name] = t
    return (vals["l_ce"] + vals["l_comp"] * eta - vals["l_inter"]
            + vals["l_intra"] * delta + vals["l_ent"])


def combine_values(terms: Mapping[str, float], eta: float, delta: float) -> float:
    """Float version of :func:`total_objective` for report bookkeeping."""
    return (terms["l_ce"] + eta * terms["l_comp"] - terms["l_inter"]
            + delta * terms["l_intra"] + terms["l_ent"])
