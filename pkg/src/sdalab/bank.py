"""Candidate bank and defending-sample retrieval.

Each epoch, the unlabeled pool is pseudo-labeled by the frozen current model
and filtered down to the most confident fraction p within each pseudo class.
During the epoch, every labeled sample in a mini-batch pulls k "defending"
samples that share its ground-truth label out of the bank; training on them
with that shared pseudo label keeps a biased labeled batch from dragging the
decision boundary through regions the model still classifies confidently.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .errors import ConfigError

CLASS_AWARE_RANDOM = "class_aware_random"
UNCONDITIONED_RANDOM = "unconditioned_random"
KMEANS_CENTER = "kmeans_center"
COSINE_DISTANT = "cosine_distant"
STRATEGIES = (CLASS_AWARE_RANDOM, UNCONDITIONED_RANDOM, KMEANS_CENTER, COSINE_DISTANT)

DUPLICATE_LABELED = "duplicate_labeled"
SKIP_WITH_FLAG = "skip_with_flag"


def top_fraction_count(p: float, n: int) -> int:
    """ceil(p*n) with a guard against float artifacts like 0.4*10 -> 4.0000...01."""
    if n == 0:
        return 0
    return math.ceil(p * n - 1e-9)


@dataclass
class RldConfig:
    p: float = 0.4
    k: int = 3
    strategy: str = CLASS_AWARE_RANDOM
    kmeans_clusters: Optional[int] = None
    empty_class_fallback: str = DUPLICATE_LABELED

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ConfigError(f"filtering rate p must be in (0,1], got {self.p}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown retrieval strategy {self.strategy!r}")
        if self.empty_class_fallback not in (DUPLICATE_LABELED, SKIP_WITH_FLAG):
            raise ConfigError(f"unknown fallback {self.empty_class_fallback!r}")
        if self.kmeans_clusters is None:
            self.kmeans_clusters = self.k
        if self.kmeans_clusters < 1:
            raise ConfigError("kmeans_clusters must be >= 1")


@dataclass
class CandidateBank:
    """Per-class confident pseudo-labeled entries, frozen for one epoch.

    class_indices[c] holds global sample indices sorted by confidence
    descending (ties by ascending index); class_conf[c] aligns with it.
    points is the full unlabeled coordinate array the indices refer into.
    """

    num_classes: int
    points: np.ndarray
    index_of: dict  # global sample index -> row in points
    class_indices: list = field(default_factory=list)
    class_conf: list = field(default_factory=list)
    epoch_stamp: int = 0

    def class_size(self, cls: int) -> int:
        return len(self.class_indices[cls])

    def sizes(self) -> list:
        return [len(ix) for ix in self.class_indices]

    def class_points(self, cls: int) -> np.ndarray:
        rows = [self.index_of[i] for i in self.class_indices[cls]]
        return self.points[rows]

    def point_of(self, global_index: int) -> np.ndarray:
        return self.points[self.index_of[global_index]]


def generate_bank(
    model: nn.MlpModel,
    unlabeled_points: np.ndarray,
    unlabeled_indices,
    p: float,
    num_classes: int,
    epoch_stamp: int = 0,
) -> CandidateBank:
    """Pseudo-label the pool and keep the top-p fraction per class by confidence."""
    if len(unlabeled_points) == 0:
        raise ConfigError("cannot build a candidate bank from an empty unlabeled pool")
    indices = np.asarray(unlabeled_indices, dtype=np.int64)
    probs = nn.forward(model, unlabeled_points).probs
    pseudo = nn.argmax_rows(probs)
    conf = probs[np.arange(len(probs)), pseudo]
    bank = CandidateBank(
        num_classes=num_classes,
        points=np.asarray(unlabeled_points, dtype=np.float64),
        index_of={int(g): row for row, g in enumerate(indices)},
        epoch_stamp=epoch_stamp,
    )
    for cls in range(num_classes):
        rows = np.flatnonzero(pseudo == cls)
        keep = top_fraction_count(p, len(rows))
        order = sorted(rows, key=lambda r: (-conf[r], indices[r]))[:keep]
        bank.class_indices.append([int(indices[r]) for r in order])
        bank.class_conf.append([float(conf[r]) for r in order])
    return bank


def _kmeans(points: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """Lloyd's algorithm, fixed 20 iterations, forgy init (random distinct rows)."""
    n = len(points)
    n_clusters = min(n_clusters, n)
    init_rows = rng.choice(n, size=n_clusters, replace=False)
    centroids = points[init_rows].copy()
    for _ in range(20):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        for c in range(n_clusters):
            members = points[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return centroids


def _nearest_per_centroid(points: np.ndarray, centroids: np.ndarray, k: int) -> list:
    """Row indices of the k retrieved points: round-robin over centroids,
    each yielding its next-nearest unused point; wraps to reuse when exhausted."""
    order_per_centroid = []
    for c in centroids:
        d = np.linalg.norm(points - c, axis=1)
        order_per_centroid.append(sorted(range(len(points)), key=lambda r: (d[r], r)))
    picks = []
    depth = 0
    while len(picks) < k:
        for order in order_per_centroid:
            if len(picks) == k:
                break
            picks.append(order[depth % len(order)])
        depth += 1
    return picks


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """1 - cos(a, rows of b); zero-norm vectors count as orthogonal."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    sim = np.zeros(len(b))
    ok = denom > 0.0
    sim[ok] = (b[ok] @ a) / denom[ok]
    return 1.0 - sim


def retrieve_defending(
    bank: CandidateBank,
    labeled_points: np.ndarray,
    labeled_labels,
    cfg: RldConfig,
    rng: np.random.Generator,
    model: Optional[nn.MlpModel] = None,
    epoch: Optional[int] = None,
) -> tuple:
    """k defending (point, pseudo-label) pairs per labeled sample.

    Returns (points, labels, fallback_events). With DuplicateLabeled the output
    always has k * len(labeled) rows; SkipWithFlag may return fewer.
    """
    if epoch is not None and epoch != bank.epoch_stamp:
        raise ConfigError(
            f"stale candidate bank: stamped epoch {bank.epoch_stamp}, now {epoch}"
        )
    if cfg.strategy == COSINE_DISTANT and model is None:
        raise ConfigError("cosine_distant retrieval needs the model for features")
    labels = np.asarray(labeled_labels, dtype=np.int64)
    out_pts, out_lab = [], []
    fallbacks = 0
    all_indices = None
    if cfg.strategy == UNCONDITIONED_RANDOM:
        all_indices = [g for cls in range(bank.num_classes) for g in bank.class_indices[cls]]
        pseudo_of = {
            g: cls for cls in range(bank.num_classes) for g in bank.class_indices[cls]
        }
    for x, y in zip(labeled_points, labels):
        cls = int(y)
        size = bank.class_size(cls) if cls < bank.num_classes else 0
        if cfg.strategy == UNCONDITIONED_RANDOM:
            pool = all_indices
            draws = rng.choice(len(pool), size=cfg.k, replace=len(pool) < cfg.k)
            for d in draws:
                g = pool[int(d)]
                out_pts.append(bank.point_of(g))
                out_lab.append(pseudo_of[g])
            continue
        if size == 0:
            fallbacks += 1
            if cfg.empty_class_fallback == DUPLICATE_LABELED:
                for _ in range(cfg.k):
                    out_pts.append(np.asarray(x, dtype=np.float64))
                    out_lab.append(cls)
            continue
        if cfg.strategy == CLASS_AWARE_RANDOM:
            draws = rng.choice(size, size=cfg.k, replace=size < cfg.k)
            for d in draws:
                out_pts.append(bank.point_of(bank.class_indices[cls][int(d)]))
                out_lab.append(cls)
        elif cfg.strategy == KMEANS_CENTER:
            pts = bank.class_points(cls)
            centroids = _kmeans(pts, cfg.kmeans_clusters, rng)
            for r in _nearest_per_centroid(pts, centroids, cfg.k):
                out_pts.append(pts[r])
                out_lab.append(cls)
        elif cfg.strategy == COSINE_DISTANT:
            feat_x = nn.penultimate_features(model, np.asarray(x, dtype=float)[None, :])[0]
            cand_pts = bank.class_points(cls)
            cand_feat = nn.penultimate_features(model, cand_pts)
            dist = _cosine_distance(feat_x, cand_feat)
            order = sorted(
                range(len(cand_pts)),
                key=lambda r: (-dist[r], bank.class_indices[cls][r]),
            )
            # fewer candidates than k wraps around deterministically
            for i in range(cfg.k):
                r = order[i % len(order)]
                out_pts.append(cand_pts[r])
                out_lab.append(cls)
    if not out_pts:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64), fallbacks
    return np.stack(out_pts), np.asarray(out_lab, dtype=np.int64), fallbacks


def rld_loss(model: nn.MlpModel, def_points: np.ndarray, def_labels) -> tuple:
    """Mean cross-entropy over defending pairs; ({loss, dprobs, trace}) or zeros.

    The mean normalizer is the actual pair count, which equals k*B under
    DuplicateLabeled and may be smaller under SkipWithFlag.
    """
    if len(def_points) == 0:
        return 0.0, None, None
    trace = nn.forward(model, def_points)
    loss, dprobs, _ = nn.loss_ce(trace.probs, def_labels)
    return loss, dprobs, trace


def generate_bank_binary(
    model: nn.MlpModel,
    unlabeled_points: np.ndarray,
    unlabeled_indices,
    p: float,
    thresholds,
    epoch_stamp: int = 0,
) -> list:
    """Binary-mode banks: one two-class bank per finding.

    Pseudo label = thresholded prediction for that finding; confidence =
    distance from the finding's threshold. Returns a list of CandidateBank,
    each with classes {0, 1}.
    """
    if len(unlabeled_points) == 0:
        raise ConfigError("cannot build a candidate bank from an empty unlabeled pool")
    indices = np.asarray(unlabeled_indices, dtype=np.int64)
    probs = nn.forward(model, unlabeled_points).probs
    thresholds = np.asarray(thresholds, dtype=float)
    banks = []
    for j in range(probs.shape[1]):
        pseudo = (probs[:, j] >= thresholds[j]).astype(np.int64)
        conf = np.abs(probs[:, j] - thresholds[j])
        bank = CandidateBank(
            num_classes=2,
            points=np.asarray(unlabeled_points, dtype=np.float64),
            index_of={int(g): row for row, g in enumerate(indices)},
            epoch_stamp=epoch_stamp,
        )
        for value in (0, 1):
            rows = np.flatnonzero(pseudo == value)
            keep = top_fraction_count(p, len(rows))
            order = sorted(rows, key=lambda r: (-conf[r], indices[r]))[:keep]
            bank.class_indices.append([int(indices[r]) for r in order])
            bank.class_conf.append([float(conf[r]) for r in order])
        banks.append(bank)
    return banks
