"""Partial-domain-adaptation datasets: synthetic Gaussian clusters under an
affine domain shift, and a plain-text feature file format.

Target labels are kept inside :class:`HiddenLabels`; training code only
ever sees a :class:`TrainingView`, which carries no target labels at all.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

HEADER_MAGIC = "pda-features"
HEADER_VERSION = "v1"
UNLABELED = -1


class HiddenLabels:
    """Evaluation-only target labels. Call :meth:`reveal` to read them."""

    __slots__ = ("_labels",)

    def __init__(self, labels):
        self._labels = np.asarray(labels, dtype=int).copy()
        self._labels.setflags(write=False)

    def reveal(self) -> np.ndarray:
        return self._labels

    @property
    def complete(self) -> bool:
        return bool(np.all(self._labels != UNLABELED))

    def __len__(self) -> int:
        return len(self._labels)

    def __repr__(self) -> str:
        return f"HiddenLabels(n={len(self)})"


@dataclass(frozen=True)
class TrainingView:
    """What training is allowed to see: labeled source, unlabeled target."""

    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    n_classes: int


@dataclass
class PdaDatasetPair:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    n_classes: int
    eval_labels: HiddenLabels | None = None
    shared_label_set: tuple[int, ...] | None = None

    def __post_init__(self):
        self.source_x = np.asarray(self.source_x, dtype=np.float64)
        self.source_y = np.asarray(self.source_y, dtype=int)
        self.target_x = np.asarray(self.target_x, dtype=np.float64).reshape(-1, self.source_x.shape[1])
        if self.source_x.ndim != 2 or len(self.source_y) != len(self.source_x):
            raise ConfigError("source features and labels disagree")
        if self.eval_labels is not None and len(self.eval_labels) != len(self.target_x):
            raise ConfigError("eval labels do not match target size")
        if not (np.all(np.isfinite(self.source_x)) and np.all(np.isfinite(self.target_x))):
            raise ConfigError("features must be finite")

    @property
    def dim(self) -> int:
        return self.source_x.shape[1]

    @property
    def n_source(self) -> int:
        return len(self.source_x)

    @property
    def n_target(self) -> int:
        return len(self.target_x)

    def training_view(self) -> TrainingView:
        return TrainingView(self.source_x, self.source_y, self.target_x, self.n_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.source_x, self.source_y, self.target_x):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.n_classes).encode())
        if self.eval_labels is not None:
            h.update(np.ascontiguousarray(self.eval_labels.reveal()).tobytes())
        return h.hexdigest()

    def equals(self, other: "PdaDatasetPair") -> bool:
        same_eval = (self.eval_labels is None) == (other.eval_labels is None)
        if same_eval and self.eval_labels is not None:
            same_eval = np.array_equal(self.eval_labels.reveal(), other.eval_labels.reveal())
        return (self.n_classes == other.n_classes and same_eval
                and np.array_equal(self.source_x, other.source_x)
                and np.array_equal(self.source_y, other.source_y)
                and np.array_equal(self.target_x, other.target_x))


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 6          # K_s
    n_shared: int = 3           # K_t, target uses classes 0..K_t-1
    dim: int = 16
    per_class: int = 100        # samples per class per domain
    center_scale: float = 4.0   # uniform: centers in [-scale, scale]^dim; simplex: edge length
    std: float = 1.0
    shift: float = 3.0          # translation magnitude applied to the target
    rotation_deg: float = 20.0  # rotation of the target in one seeded plane
    seed: int = 0
    layout: str = "uniform"     # "uniform" or "simplex"
    shift_toward: str = "random"  # "random" or "private": shared-class mean toward private-class mean

    def validate(self) -> None:
        if not 1 <= self.n_shared < self.n_classes:
            raise ConfigError(f"need 1 <= n_shared < n_classes, got {self.n_shared}, {self.n_classes}")
        if self.std <= 0:
            raise ConfigError("std must be > 0")
        if self.dim < 2:
            raise ConfigError("dim must be >= 2 for the rotation plane")
        if self.per_class < 1:
            raise ConfigError("per_class must be >= 1")
        if self.center_scale <= 0 or self.shift < 0:
            raise ConfigError("center_scale must be > 0 and shift >= 0")
        if self.layout not in ("uniform", "simplex"):
            raise ConfigError(f"layout must be 'uniform' or 'simplex', got {self.layout!r}")
        if self.shift_toward not in ("random", "private"):
            raise ConfigError(f"shift_toward must be 'random' or 'private', got {self.shift_toward!r}")
        if self.layout == "simplex":
            if self.n_classes > self.dim:
                raise ConfigError("simplex layout needs dim >= n_classes")
            if self.center_scale < 4.0 * self.std:
                raise ConfigError("simplex edge must be at least 4 standard deviations")


# Desk-scale benchmark: simplex centers 8 sigma apart, target translated half an
# edge toward the private classes and rotated 20 degrees. Unit-ish feature scale
# (edge 2) so default-style initial weights see inputs of order one.
STANDARD_TASK = SynthConfig(layout="simplex", center_scale=2.0, std=0.25, shift=1.0,
                            rotation_deg=20.0, shift_toward="private")


def _class_centers(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.layout == "simplex":
        k = cfg.n_classes
        vertices = (np.eye(k) - 1.0 / k) * (cfg.center_scale / np.sqrt(2.0))
        basis, _ = np.linalg.qr(rng.normal(size=(cfg.dim, k)))
        return vertices @ basis.T
    min_sep = 4.0 * cfg.std
    for _ in range(10_000):
        c = rng.uniform(-cfg.center_scale, cfg.center_scale, size=(cfg.n_classes, cfg.dim))
        d = np.linalg.norm(c[:, None] - c[None], axis=-1)
        if d[np.triu_indices(cfg.n_classes, 1)].min() >= min_sep:
            return c
    raise ConfigError("could not place class centers with 4-sigma separation; raise center_scale")


def _shift_transform(cfg: SynthConfig, centers: np.ndarray, rng: np.random.Generator):
    basis, _ = np.linalg.qr(rng.normal(size=(cfg.dim, 2)))
    theta = np.deg2rad(cfg.rotation_deg)
    u, v = basis[:, 0], basis[:, 1]
    rot = (np.eye(cfg.dim)
           + (np.cos(theta) - 1.0) * (np.outer(u, u) + np.outer(v, v))
           + np.sin(theta) * (np.outer(v, u) - np.outer(u, v)))
    direction = rng.normal(size=cfg.dim)
    if cfg.shift_toward == "private":
        direction = (centers[cfg.n_shared:].mean(axis=0) - centers[:cfg.n_shared].mean(axis=0))
    direction /= np.linalg.norm(direction)
    return rot, cfg.shift * direction


def synth_pda_generate(cfg: SynthConfig) -> PdaDatasetPair:
    """Gaussian clusters for all classes in the source; the first ``n_shared``
    classes, rotated about the centers' mean and translated, in the target."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    centers = _class_centers(cfg, rng)
    rot, offset = _shift_transform(cfg, centers, rng)
    pivot = centers.mean(axis=0)

    src_y = np.repeat(np.arange(cfg.n_classes), cfg.per_class)
    src_x = centers[src_y] + cfg.std * rng.normal(size=(len(src_y), cfg.dim))
    tgt_y = np.repeat(np.arange(cfg.n_shared), cfg.per_class)
    raw = centers[tgt_y] + cfg.std * rng.normal(size=(len(tgt_y), cfg.dim))
    tgt_x = (raw - pivot) @ rot.T + pivot + offset

    s_perm = rng.permutation(len(src_y))
    t_perm = rng.permutation(len(tgt_y))
    return PdaDatasetPair(
        source_x=src_x[s_perm], source_y=src_y[s_perm], target_x=tgt_x[t_perm],
        n_classes=cfg.n_classes, eval_labels=HiddenLabels(tgt_y[t_perm]),
        shared_label_set=tuple(range(cfg.n_shared)),
    )


def write_feature_file(pair: PdaDatasetPair, path: str | Path) -> None:
    lines = [f"{HEADER_MAGIC} {HEADER_VERSION} dim={pair.dim} classes={pair.n_classes}"]
    fmt = lambda row: ",".join(format(float(v), ".17g") for v in row)  # noqa: E731
    for x, y in zip(pair.source_x, pair.source_y):
        lines.append(f"s,{int(y)},{fmt(x)}")
    tlabels = (pair.eval_labels.reveal() if pair.eval_labels is not None
               else np.full(pair.n_target, UNLABELED))
    for x, y in zip(pair.target_x, tlabels):
        lines.append(f"t,{'?' if y == UNLABELED else int(y)},{fmt(x)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> tuple[int, int]:
    parts = line.split()
    if len(parts) != 4 or parts[0] != HEADER_MAGIC or parts[1] != HEADER_VERSION:
        raise ParseError(f"bad header {line!r}", line=1)
    fields = {}
    for p in parts[2:]:
        key, sep, val = p.partition("=")
        if not sep or key not in ("dim", "classes"):
            raise ParseError(f"bad header field {p!r}", line=1)
        try:
            fields[key] = int(val)
        except ValueError:
            raise ParseError(f"header field {key} is not an integer", line=1) from None
    if set(fields) != {"dim", "classes"} or fields["dim"] < 1 or fields["classes"] < 1:
        raise ParseError("header needs positive dim= and classes=", line=1)
    return fields["dim"], fields["classes"]


def load_feature_file(path: str | Path) -> PdaDatasetPair:
    """Parse a ``pda-features v1`` file. Target labels, if given, are hidden."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file", line=1)
    dim, n_classes = _parse_header(lines[0])
    src_x, src_y, tgt_x, tgt_y = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != dim + 2:
            raise ParseError(f"expected {dim} features, found {len(cells) - 2}", line=lineno)
        domain, label = cells[0].strip(), cells[1].strip()
        if domain not in ("s", "t"):
            raise ParseError(f"unknown domain {domain!r}", line=lineno)
        try:
            feats = [float(c) for c in cells[2:]]
        except ValueError:
            raise ParseError("non-numeric feature", line=lineno) from None
        if not all(np.isfinite(feats)):
            raise ParseError("non-finite feature", line=lineno)
        if label == "?":
            if domain == "s":
                raise ParseError("source rows must be labeled", line=lineno)
            y = UNLABELED
        else:
            try:
                y = int(label)
            except ValueError:
                raise ParseError(f"bad label {label!r}", line=lineno) from None
            if not 0 <= y < n_classes:
                raise ParseError(f"label {y} outside [0, {n_classes})", line=lineno)
        if domain == "s":
            src_x.append(feats)
            src_y.append(y)
        else:
            tgt_x.append(feats)
            tgt_y.append(y)
    if not src_x:
        raise ParseError("no source rows", line=len(lines))
    tgt_y = np.array(tgt_y, dtype=int)
    eval_labels = None
    shared = None
    if len(tgt_y) and np.any(tgt_y != UNLABELED):
        eval_labels = HiddenLabels(tgt_y)
        shared = tuple(sorted(set(tgt_y[tgt_y != UNLABELED].tolist())))
    return PdaDatasetPair(
        source_x=np.array(src_x), source_y=np.array(src_y), target_x=np.array(tgt_x).reshape(-1, dim),
        n_classes=n_classes, eval_labels=eval_labels, shared_label_set=shared,
    )


def minibatches(n: int, batch_size: int, epoch_seed: int | np.random.Generator) -> list[np.ndarray]:
    """Seeded shuffle of ``range(n)`` cut into batches; the last may be short."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    perm = np.random.default_rng(epoch_seed).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class BatchCycler:
    """Endless stream of index batches over ``range(n)``, reshuffled each pass."""

    n: int
    batch_size: int
    rng: np.random.Generator
    _queue: list = field(default_factory=list)

    def next(self) -> np.ndarray:
        if not self._queue:
            self._queue = minibatches(self.n, self.batch_size, self.rng)
        return self._queue.pop(0)
