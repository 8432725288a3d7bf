"""Synthetic-outlier engine used during fine-tuning.

Per batch it: picks a class subset sized to the batch budget, EMA-updates
global/per-class centers, covariances and reference Mahalanobis distances,
mines projection-boundary samples, pushes them outward to get outlier
centers, samples Gaussian candidates around those centers, deletes the
ID-like ones by a Mahalanobis margin, caps the survivors, and attaches
distance-ratio soft labels over K+1 classes.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (TooFewSamples, mahalanobis_sq, regularized_inverse,
                       sample_covariance)
from .projections import DegenerateScatter, lda_fit, mine_boundary, pca_fit


class UninitializedState(Exception):
    pass


class AllFiltered(Exception):
    """Every candidate was deleted; the batch proceeds ID-only."""


@dataclass
class GrodConfig:
    a: float = 0.1                 # boundary extension length
    gamma: float = 0.1             # loss mix weight
    gamma_opt: float = 0.1         # EMA rate for centers/covs/distances
    num: int | None = None         # candidates per cluster group
    warmup_batches: int = 5
    lambda_filter: float = 0.1
    eps: float = 1e-7
    eps0: float = 1e-4
    pca_axes: int | None = None    # default min(s, 8)
    lda_axes: int | None = None    # default min(K-1, 4)

    def __post_init__(self):
        if self.a <= 0 or not 0 <= self.gamma <= 1 or not 0 < self.gamma_opt <= 1:
            raise ValueError("invalid config: need a>0, gamma in [0,1], "
                             "gamma_opt in (0,1]")
        if self.lambda_filter < 0:
            raise ValueError("lambda_filter must be >= 0")


@dataclass
class GrodState:
    n_id_classes: int
    dim: int
    mu_pca: np.ndarray | None = None
    cov_pca: np.ndarray | None = None
    dist_id_pca: float | None = None
    mu_lda: dict = field(default_factory=dict)      # class -> center
    cov_lda: dict = field(default_factory=dict)
    dist_id_lda: dict = field(default_factory=dict)
    batch_index: int = 0
    initialized: bool = False
    pool_f: list = field(default_factory=list)
    pool_y: list = field(default_factory=list)

    def to_dict(self):
        d = {"n_id_classes": self.n_id_classes, "dim": self.dim,
             "batch_index": self.batch_index,
             "initialized": self.initialized}
        if self.initialized:
            d.update(mu_pca=self.mu_pca, cov_pca=self.cov_pca,
                     dist_id_pca=self.dist_id_pca,
                     classes=sorted(self.mu_lda),
                     mu_lda=[self.mu_lda[c] for c in sorted(self.mu_lda)],
                     cov_lda=[self.cov_lda[c] for c in sorted(self.mu_lda)],
                     dist_id_lda=[self.dist_id_lda[c] for c in sorted(self.mu_lda)])
        return d

    @classmethod
    def from_dict(cls, d):
        state = cls(n_id_classes=int(d["n_id_classes"]), dim=int(d["dim"]),
                    batch_index=int(d["batch_index"]),
                    initialized=bool(d["initialized"]))
        if state.initialized:
            state.mu_pca = np.asarray(d["mu_pca"], dtype=float)
            state.cov_pca = np.asarray(d["cov_pca"], dtype=float)
            state.dist_id_pca = float(d["dist_id_pca"])
            for idx, c in enumerate(d["classes"]):
                c = int(c)
                state.mu_lda[c] = np.asarray(d["mu_lda"][idx], dtype=float)
                state.cov_lda[c] = np.asarray(d["cov_lda"][idx], dtype=float)
                state.dist_id_lda[c] = float(d["dist_id_lda"][idx])
        return state


def _class_cov(rows, eps0, dim):
    try:
        return sample_covariance(rows)
    except TooFewSamples:
        return eps0 * np.eye(dim)


def select_classes(class_counts, batch_size, n_id_classes):
    """Budgeted class subset: kappa = min(|eligible|, max(1, floor(2B/K))),
    top-kappa classes by count, ties broken toward smaller class index."""
    eligible = sorted(c for c, n in class_counts.items() if n > 1)
    kappa = min(len(eligible),
                max(1, (2 * batch_size) // n_id_classes))
    ranked = sorted(eligible, key=lambda c: (-class_counts[c], c))
    return kappa, sorted(ranked[:kappa])


def _ema(old, new, rate):
    return (1.0 - rate) * old + rate * new


def id_reference_distances(f, y, state, eps0=1e-4):
    """Batch-mean squared Mahalanobis distances to the tracked centers."""
    if not state.initialized:
        raise UninitializedState("state not initialized; run warmup first")
    inv = regularized_inverse(state.cov_pca, eps0)
    dist_pca = float(np.mean(
        [mahalanobis_sq(v, state.mu_pca, inv) for v in f]))
    dist_lda = {}
    for c in sorted(state.mu_lda):
        rows = f[y == c]
        if rows.shape[0] == 0:
            continue
        inv_c = regularized_inverse(state.cov_lda[c], eps0)
        dist_lda[c] = float(np.mean(
            [mahalanobis_sq(v, state.mu_lda[c], inv_c) for v in rows]))
    return dist_pca, dist_lda


def update_centers(state, f, y, subset, gamma_opt, eps0=1e-4):
    """EMA update of centers, covariances and reference distances."""
    if not state.initialized:
        raise UninitializedState("state not initialized; run warmup first")
    state.mu_pca = _ema(state.mu_pca, f.mean(axis=0), gamma_opt)
    state.cov_pca = _ema(state.cov_pca, _class_cov(f, eps0, state.dim),
                         gamma_opt)
    for c in subset:
        rows = f[y == c]
        if rows.shape[0] == 0:
            continue
        mu_new = rows.mean(axis=0)
        cov_new = _class_cov(rows, eps0, state.dim)
        if c in state.mu_lda:
            state.mu_lda[c] = _ema(state.mu_lda[c], mu_new, gamma_opt)
            state.cov_lda[c] = _ema(state.cov_lda[c], cov_new, gamma_opt)
        else:
            state.mu_lda[c] = mu_new
            state.cov_lda[c] = cov_new
    dist_pca, dist_lda = id_reference_distances(f, y, state, eps0)
    state.dist_id_pca = _ema(state.dist_id_pca, dist_pca, gamma_opt)
    for c, d in dist_lda.items():
        if c in state.dist_id_lda:
            state.dist_id_lda[c] = _ema(state.dist_id_lda[c], d, gamma_opt)
        else:
            state.dist_id_lda[c] = d
    return state


def initialize_state(state, f, y, eps0=1e-4):
    """Seed centers/covariances/distances from a pooled warmup feature set."""
    f = np.asarray(f, dtype=float)
    y = np.asarray(y)
    state.mu_pca = f.mean(axis=0)
    state.cov_pca = _class_cov(f, eps0, state.dim)
    for c in sorted(np.unique(y)):
        rows = f[y == c]
        state.mu_lda[int(c)] = rows.mean(axis=0)
        state.cov_lda[int(c)] = _class_cov(rows, eps0, state.dim)
    state.initialized = True
    dist_pca, dist_lda = id_reference_distances(f, y, state, eps0)
    state.dist_id_pca = dist_pca
    state.dist_id_lda = dist_lda
    state.pool_f = []
    state.pool_y = []
    return state


def build_ood_centers(boundaries, state, a, eps=1e-7):
    """Extend each boundary point outward from its cluster center by length a.

    boundaries: list of (BoundarySet, class_or_None).  Returns a list of
    (center, class_or_None) pairs, one per boundary point.
    """
    if not state.initialized:
        raise UninitializedState("state not initialized; run warmup first")
    centers = []
    for bset, cls in boundaries:
        mu = state.mu_pca if cls is None else state.mu_lda[cls]
        for v in bset.points:
            direction = (v - mu) / (np.linalg.norm(v - mu) + eps)
            centers.append((v + a * direction, cls))
    return centers


def sample_fake_ood(ood_centers, a, num, rng):
    """Per provenance group, draw num points ~ N(center, (a/3) I) round-robin
    over that group's centers.  Returns (points, provenance list)."""
    if not ood_centers:
        raise ValueError("no outlier centers")
    groups = {}
    for center, cls in ood_centers:
        groups.setdefault(cls, []).append(center)
    std = math.sqrt(a / 3.0)
    points, provenance = [], []
    keys = sorted(groups, key=lambda c: (c is not None, c))
    for key in keys:
        members = groups[key]
        for j in range(num):
            center = members[j % len(members)]
            points.append(center + std * rng.standard_normal(center.size))
            provenance.append(key)
    return np.array(points), provenance


def ood_distance(v, state, subset, eps0=1e-4, inv_cache=None):
    """Distance of a candidate to the tracked ID clusters.

    Returns (distance, nearest_class); nearest_class is None when the class
    subset is empty (global center route).
    """
    if not state.initialized:
        raise UninitializedState("state not initialized; run warmup first")
    if inv_cache is None:
        inv_cache = {}
    if len(subset) == 0:
        if "pca" not in inv_cache:
            inv_cache["pca"] = regularized_inverse(state.cov_pca, eps0)
        return mahalanobis_sq(v, state.mu_pca, inv_cache["pca"]), None
    best, best_c = None, None
    for c in sorted(state.mu_lda):
        if c not in inv_cache:
            inv_cache[c] = regularized_inverse(state.cov_lda[c], eps0)
        d = mahalanobis_sq(v, state.mu_lda[c], inv_cache[c])
        if best is None or d < best:
            best, best_c = d, c
    return best, best_c


def filter_fake_ood(candidates, state, lambda_filter, batch_size,
                    n_id_classes, rng, subset, eps0=1e-4):
    """Delete ID-like candidates by the Mahalanobis margin, then randomly
    downsample the survivors to at most floor(B/K) + 2 points."""
    candidates = np.asarray(candidates, dtype=float)
    inv_cache = {}
    dist_ood = np.empty(len(candidates))
    dist_ref = np.empty(len(candidates))
    for i, v in enumerate(candidates):
        d, c = ood_distance(v, state, subset, eps0, inv_cache)
        dist_ood[i] = d
        dist_ref[i] = state.dist_id_pca if c is None else state.dist_id_lda[c]
    margin = lambda_filter * (10.0 / len(candidates)) * float(
        np.sum(dist_ood / np.maximum(dist_ref, 1e-12) - 1.0))
    keep = dist_ood >= (1.0 + margin) * dist_ref
    kept_idx = np.nonzero(keep)[0]
    if kept_idx.size == 0:
        raise AllFiltered("no candidate survived the Mahalanobis margin")
    cap = batch_size // n_id_classes + 2
    if kept_idx.size > cap:
        kept_idx = np.sort(rng.choice(kept_idx, size=cap, replace=False))
    return candidates[kept_idx]


def soft_labels(points, state, n_id_classes, eps0=1e-4):
    """Distance-ratio soft labels over K+1 classes, normalized to sum 1.

    Per class j the raw label is exp(ratio_j - 1) with
    ratio_j = reference distance of class j / distance of the point to
    class j; the OOD entry is exp(1 - max_j ratio_j).  The normalized
    result is the softmax of those exponents, which keeps far points
    concentrated on K+1 without overflow.
    """
    if not state.initialized:
        raise UninitializedState("state not initialized; run warmup first")
    classes = sorted(state.mu_lda)
    inv = {c: regularized_inverse(state.cov_lda[c], eps0) for c in classes}
    k = n_id_classes
    labels = np.zeros((len(points), k + 1))
    for i, v in enumerate(points):
        exponents = np.full(k + 1, -np.inf)
        ratios = []
        for c in classes:
            d = max(mahalanobis_sq(v, state.mu_lda[c], inv[c]), 1e-12)
            ratio = state.dist_id_lda[c] / d
            ratios.append(ratio)
            exponents[c - 1] = ratio - 1.0
        exponents[k] = 1.0 - max(ratios)
        shifted = exponents - np.max(exponents)
        e = np.exp(shifted)
        labels[i] = e / e.sum()
    return labels


def one_hot(y, n_id_classes):
    """ID labels as one-hot rows over K+1 classes (zero mass at K+1)."""
    out = np.zeros((len(y), n_id_classes + 1))
    out[np.arange(len(y)), np.asarray(y, dtype=int) - 1] = 1.0
    return out


def grod_augment_batch(f, y, state, config, rng):
    """Full per-batch pipeline; returns (f_all, labels_all, info).

    During warmup the batch passes through unchanged (one-hot labels) while
    statistics accumulate.  Candidate generation degrades gracefully:
    an all-filtered batch, too-small batch or degenerate scatter falls back
    to ID-only output.
    """
    f = np.asarray(f, dtype=float)
    y = np.asarray(y, dtype=int)
    k = state.n_id_classes
    id_labels = one_hot(y, k)
    batch_size = f.shape[0]

    if not state.initialized:
        state.pool_f.append(f.copy())
        state.pool_y.append(y.copy())
        state.batch_index += 1
        if state.batch_index >= config.warmup_batches:
            initialize_state(state, np.vstack(state.pool_f),
                             np.concatenate(state.pool_y), config.eps0)
        return f, id_labels, {"warmup": True, "n_fake": 0, "kappa": 0}

    state.batch_index += 1
    counts = {int(c): int(n) for c, n in zip(*np.unique(y, return_counts=True))}
    kappa, subset = select_classes(counts, batch_size, k)
    update_centers(state, f, y, subset, config.gamma_opt, config.eps0)

    info = {"warmup": False, "n_fake": 0, "kappa": kappa}
    if batch_size < 2:
        return f, id_labels, info

    s = f.shape[1]
    p_pca = min(config.pca_axes or min(s, 8), s, batch_size - 1)
    boundaries = [(mine_boundary(f, pca_fit(f, p_pca)), None)]
    if kappa > 0:
        n_eligible = sum(1 for n in counts.values() if n >= 2)
        if n_eligible >= 2:
            p_lda = min(config.lda_axes or min(k - 1, 4), n_eligible - 1)
            try:
                for basis in lda_fit(f, y, p_lda, config.eps0):
                    if basis.class_id in subset:
                        boundaries.append(
                            (mine_boundary(f[y == basis.class_id], basis),
                             basis.class_id))
            except DegenerateScatter:
                pass

    centers = build_ood_centers(boundaries, state, config.a, config.eps)
    num = config.num or max(8, math.ceil(batch_size / (kappa + 1)))
    candidates, _ = sample_fake_ood(centers, config.a, num, rng)
    try:
        kept = filter_fake_ood(candidates, state, config.lambda_filter,
                               batch_size, k, rng, subset, config.eps0)
    except AllFiltered:
        return f, id_labels, info

    if kappa > 0 and state.mu_lda:
        fake_labels = soft_labels(kept, state, k, config.eps0)
    else:
        fake_labels = np.zeros((len(kept), k + 1))
        fake_labels[:, k] = 1.0
    info["n_fake"] = len(kept)
    return (np.vstack([f, kept]), np.vstack([id_labels, fake_labels]), info)
