"""Positive-unlabeled dataset construction.

Unknown samples are ranked by feature-space distance to their nearest known
positive.  The most similar fraction is treated as possibly mislabeled and
never drawn as a negative; negatives are drawn uniformly from the rest.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .tensor import rng_stream

log = logging.getLogger(__name__)

METRICS = ("euclidean", "cosine")


class PoolExhaustedError(ValueError):
    pass


class StratificationWarning(UserWarning):
    pass


@dataclass
class SamplingConfig:
    filter_range: float = 0.10
    n_negatives: int | str = "match_positives"
    metric: str = "euclidean"
    oversample: bool = True
    features: str = "ssl"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.filter_range < 1.0:
            raise ValueError("filter_range must be in [0, 1)")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.features not in ("ssl", "raw"):
            raise ValueError("features must be 'ssl' or 'raw'")
        if not (self.n_negatives == "match_positives" or (isinstance(self.n_negatives, int)
                                                          and self.n_negatives > 0)):
            raise ValueError("n_negatives must be a positive int or 'match_positives'")

    def resolve_n_negatives(self, n_positives: int) -> int:
        return n_positives if self.n_negatives == "match_positives" else int(self.n_negatives)


@dataclass
class SimilarityScale:
    unknown_ids: np.ndarray
    distance: np.ndarray
    order: np.ndarray  # positions into unknown_ids, most similar first

    @property
    def ranked_ids(self) -> np.ndarray:
        return self.unknown_ids[self.order]

    def ranks(self) -> np.ndarray:
        """Rank (0 = most similar) of each entry of ``unknown_ids``."""
        r = np.empty(self.order.size, dtype=np.int64)
        r[self.order] = np.arange(self.order.size)
        return r


def similarity_scale(features_unknown: np.ndarray, features_positive: np.ndarray, metric: str = "euclidean",
                     unknown_ids: np.ndarray | None = None,
                     positive_ids: np.ndarray | None = None) -> SimilarityScale:
    """Nearest-positive distance per unknown sample; ties ordered by ascending id."""
    fu = np.asarray(features_unknown, dtype=np.float64)
    fp = np.asarray(features_positive, dtype=np.float64)
    if fu.ndim == 1:
        fu = fu[:, None]
    if fp.ndim == 1:
        fp = fp[:, None]
    if len(fp) == 0:
        raise ValueError("similarity scale needs at least one positive sample")
    if fu.shape[1] != fp.shape[1]:
        raise ValueError("unknown and positive features differ in dimension")
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    ids = np.arange(len(fu)) if unknown_ids is None else np.asarray(unknown_ids, dtype=np.int64)
    if positive_ids is not None and np.intersect1d(ids, positive_ids).size:
        raise ValueError("positive samples must not appear among the unknowns")
    d = np.empty(len(fu))
    for s in range(0, len(fu), 4096):
        with np.errstate(invalid="ignore", divide="ignore"):
            block = cdist(fu[s:s + 4096], fp, metric=metric)
        # cosine distance to or from a zero vector is undefined; count it as orthogonal
        d[s:s + 4096] = np.nan_to_num(block, nan=1.0).min(axis=1) if len(block) else block
    d = np.maximum(d, 0.0)
    return SimilarityScale(ids, d, np.lexsort((ids, d)))


def n_filtered(filter_range: float, n_unknown: int) -> int:
    # round first so that e.g. 0.1 * 30 = 3.0000000000000004 filters 3, not 4
    return int(math.ceil(round(filter_range * n_unknown, 9)))


def select_negatives(scale: SimilarityScale, cfg: SamplingConfig, rng: np.random.Generator,
                     n_positives: int | None = None) -> np.ndarray:
    """Sorted ids of negatives drawn uniformly outside the most-similar ``filter_range``."""
    if cfg.n_negatives == "match_positives" and n_positives is None:
        raise ValueError("n_positives is required when n_negatives is 'match_positives'")
    n = cfg.resolve_n_negatives(n_positives or 0)
    eligible = scale.ranked_ids[n_filtered(cfg.filter_range, scale.unknown_ids.size):]
    if eligible.size < n:
        raise PoolExhaustedError(f"only {eligible.size} eligible unknowns for {n} negatives")
    return np.sort(rng.choice(eligible, size=n, replace=False))


def balance_oversample(pos_ids, neg_ids, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Duplicate the minority class to parity: every member floor(b/a) times, plus b mod a random extras.

    Returns (ids, labels) with positives first.
    """
    pos = np.asarray(pos_ids, dtype=np.int64)
    neg = np.asarray(neg_ids, dtype=np.int64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both classes must be non-empty")

    def grow(small, target):
        reps, extra = divmod(target, small.size)
        picked = rng.choice(small, size=extra, replace=False) if extra else small[:0]
        return np.sort(np.concatenate([np.repeat(small, reps), picked]))
    if pos.size < neg.size:
        pos = grow(pos, neg.size)
    elif neg.size < pos.size:
        neg = grow(neg, pos.size)
    ids = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size, np.int8), np.zeros(neg.size, np.int8)])
    return ids, labels


def _largest_remainder(sizes: np.ndarray, frac: float) -> np.ndarray:
    quota = sizes * frac
    alloc = np.floor(quota).astype(np.int64)
    short = int(round(sizes.sum() * frac)) - alloc.sum()
    if short > 0:
        order = np.lexsort((np.arange(sizes.size), -(quota - alloc)))
        alloc[order[:short]] += 1
    return alloc


def split_80_10_10(ids, labels, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified, disjoint, exhaustive train/val/test split of labeled ids.

    Classes with fewer than 3 members are kept whole in train (with a
    warning).  Every other class gets at least one validation and one test
    member.
    """
    ids = np.asarray(ids, dtype=np.int64)
    labels = np.asarray(labels)
    if ids.size != labels.size:
        raise ValueError("ids and labels must have equal length")
    if ids.size < 10:
        raise ValueError("an 80/10/10 split needs at least 10 labeled samples")
    if np.unique(ids).size != ids.size:
        raise ValueError("ids must be unique")
    classes = np.unique(labels)
    members = [np.sort(ids[labels == c]) for c in classes]
    sizes = np.array([m.size for m in members])
    splittable = sizes >= 3
    for c, ok in zip(classes, splittable):
        if not ok:
            warnings.warn(f"class {c} has fewer than 3 members; kept whole in train", StratificationWarning,
                          stacklevel=2)
    eff = np.where(splittable, sizes, 0)
    n_val = np.maximum(_largest_remainder(eff, 0.1), splittable.astype(np.int64))
    n_test = np.maximum(_largest_remainder(eff, 0.1), splittable.astype(np.int64))
    train, val, test = [], [], []
    for c, m, nv, nt in zip(classes, members, n_val, n_test):
        perm = m[rng_stream(seed, "split", int(c)).permutation(m.size)]
        val.append(perm[:nv])
        test.append(perm[nv:nv + nt])
        train.append(perm[nv + nt:])
    return tuple(np.sort(np.concatenate(part)) for part in (train, val, test))


# -- exports -------------------------------------------------------------------

def write_scale_csv(path, scale: SimilarityScale, cols: int) -> None:
    ranks = scale.ranks()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "row", "col", "distance", "rank"])
        for i in scale.order:
            sid = int(scale.unknown_ids[i])
            w.writerow([sid, sid // cols, sid % cols, repr(float(scale.distance[i])), int(ranks[i])])


def read_scale_csv(path) -> SimilarityScale:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = np.array([int(r["sample_id"]) for r in rows], dtype=np.int64)
    dist = np.array([float(r["distance"]) for r in rows])
    return SimilarityScale(ids, dist, np.lexsort((ids, dist)))


def write_ids_csv(path, ids, cols: int, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "row", "col"] + (["label"] if labels is not None else []))
        for k, sid in enumerate(np.asarray(ids, dtype=np.int64)):
            row = [int(sid), int(sid) // cols, int(sid) % cols]
            w.writerow(row + ([int(labels[k])] if labels is not None else []))


def read_ids_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = np.array([int(r["sample_id"]) for r in rows], dtype=np.int64)
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int8) if rows and "label" in rows[0] else None
    return ids, labels
