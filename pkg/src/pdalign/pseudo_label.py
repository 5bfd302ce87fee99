"""Pseudo-labels for the target domain from a cosine prototype classifier.

Centroids follow an EMA of source class means; per-class adaptive thresholds
decide which target samples are confident enough to supervise.

Everything here works on plain arrays: the pseudo-labeling path is
bookkeeping and never receives gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError

COS_EPS = 1e-12


@dataclass
class Prototypes:
    centroids: np.ndarray      # (K, d)
    initialized: np.ndarray    # (K,) bool

    @classmethod
    def empty(cls, n_classes: int, dim: int) -> "Prototypes":
        return cls(np.zeros((n_classes, dim)), np.zeros(n_classes, dtype=bool))

    @property
    def n_classes(self) -> int:
        return self.centroids.shape[0]

    def copy(self) -> "Prototypes":
        return Prototypes(self.centroids.copy(), self.initialized.copy())


@dataclass
class ConfidentSubset:
    """Target samples admitted for supervision, as indices into the target set."""

    indices: np.ndarray        # (n_tau,) int
    soft_labels: np.ndarray    # (n_tau, K)
    labels: np.ndarray         # (n_tau,) argmax of soft_labels

    def __len__(self) -> int:
        return len(self.indices)

    @classmethod
    def empty(cls, n_classes: int) -> "ConfidentSubset":
        return cls(np.zeros(0, dtype=int), np.zeros((0, n_classes)), np.zeros(0, dtype=int))


def compute_class_means(embeddings: np.ndarray, labels: np.ndarray,
                        n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class mean embedding and a mask of classes present in ``labels``.

    Rows of absent classes are zero and must not be read.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if z.ndim != 2 or len(labels) != z.shape[0]:
        raise DimensionError("embeddings and labels disagree in length")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError("label outside [0, n_classes)")
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    sums = np.zeros((n_classes, z.shape[1]))
    np.add.at(sums, labels, z)
    present = counts > 0
    means = np.zeros_like(sums)
    means[present] = sums[present] / counts[present, None]
    return means, present


def ema_update(prototypes: Prototypes, means: np.ndarray, present: np.ndarray,
               omega: float) -> Prototypes:
    """Blend fresh class means into the centroids; a class seen for the first
    time takes its mean directly."""
    if not 0.0 <= omega <= 1.0:
        raise DomainError(f"omega must be in [0, 1], got {omega}")
    out = prototypes.copy()
    blend = present & prototypes.initialized
    fresh = present & ~prototypes.initialized
    out.centroids[blend] = omega * means[blend] + (1.0 - omega) * prototypes.centroids[blend]
    out.centroids[fresh] = means[fresh]
    out.initialized = prototypes.initialized | present
    return out


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cosine_matrix(z: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    zn = np.linalg.norm(z, axis=1, keepdims=True)
    cn = np.linalg.norm(centroids, axis=1, keepdims=True)
    dots = z @ centroids.T
    denom = zn * cn.T
    return np.where(denom > COS_EPS, dots / np.maximum(denom, COS_EPS), 0.0)


def prototype_predict(z: np.ndarray, prototypes: Prototypes) -> tuple[np.ndarray, np.ndarray]:
    """Soft pseudo-labels (softmax of cosine similarities) and their one-hot argmax."""
    if not prototypes.initialized.all():
        missing = np.flatnonzero(~prototypes.initialized).tolist()
        raise DomainError(f"prototypes not initialized for classes {missing}")
    z = np.asarray(z, dtype=np.float64)
    p_hat = _softmax_rows(cosine_matrix(z, prototypes.centroids))
    onehot = np.eye(prototypes.n_classes)[p_hat.argmax(axis=1)]
    return p_hat, onehot


def mean_confidence(preds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean of ``max(p)`` over samples grouped by ``argmax(p)``, with a presence mask."""
    preds = np.asarray(preds, dtype=np.float64)
    if preds.shape[0] == 0:
        raise DomainError("mean_confidence needs a nonempty batch")
    k = preds.shape[1]
    arg = preds.argmax(axis=1)
    conf = preds.max(axis=1)
    counts = np.bincount(arg, minlength=k).astype(np.float64)
    sums = np.bincount(arg, weights=conf, minlength=k)
    present = counts > 0
    out = np.zeros(k)
    out[present] = sums[present] / counts[present]
    return out, present


def adaptive_threshold(p_src: np.ndarray, p_tgt: np.ndarray, src_present: np.ndarray,
                       tgt_present: np.ndarray, zeta: float,
                       prev_tau: np.ndarray | None = None) -> np.ndarray:
    """Per-class threshold ``min(exp(r**zeta) - 1, 1) * p_src`` with ``r = p_tgt / p_src``.

    Target classes with no predictions get the strict value ``p_src``.
    Source classes with no predictions keep ``prev_tau`` (1.0 if none).
    """
    if not zeta > 0:
        raise DomainError(f"zeta must be > 0, got {zeta}")
    p_src = np.asarray(p_src, dtype=np.float64)
    p_tgt = np.asarray(p_tgt, dtype=np.float64)
    k = p_src.shape[0]
    prev = np.ones(k) if prev_tau is None else np.asarray(prev_tau, dtype=np.float64)
    tau = prev.copy()
    for c in np.flatnonzero(src_present):
        ps = p_src[c]
        if not tgt_present[c] or ps <= 0.0:
            tau[c] = ps
            continue
        ratio = p_tgt[c] / ps
        # exp(r**zeta) - 1 >= 1 once r**zeta >= ln 2; skip the power to avoid overflow.
        scale = 1.0 if ratio >= np.log(2.0) ** (1.0 / zeta) else np.expm1(ratio**zeta)
        tau[c] = min(scale, 1.0) * ps
    return tau


def select_confident(p_hat: np.ndarray, tau: np.ndarray) -> ConfidentSubset:
    """Admit sample j iff ``max(p_hat[j]) >= tau[argmax(p_hat[j])]``."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    arg = p_hat.argmax(axis=1)
    keep = np.flatnonzero(p_hat.max(axis=1) >= np.asarray(tau)[arg])
    return ConfidentSubset(keep, p_hat[keep].copy(), arg[keep])
