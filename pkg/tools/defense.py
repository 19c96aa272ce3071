# tools/defense.py
# Server-side poisoning filter: structural (mask Jaccard) stage followed by
# the semantic (sign-cosine + DBSCAN) stage.

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from loguru import logger
from sklearn.cluster import DBSCAN

from tools.errors import DegenerateFilterError, InvalidArgumentError
from tools.params import PackPartition, ParamVector, as_param_vector, densify, round_half_up
from tools.sparsify import SparseMask, SparseUpdate

NOISE = -1

# sklearn refuses eps == 0; on non-negative distances the smallest positive
# double gives the same "distance <= 0" neighbourhood.
_MIN_EPS = np.nextafter(0.0, 1.0)


# -------- Types --------
@dataclass(frozen=True, eq=False)
class SignVector:
    """
    Ternary sign of a client's delta.

    `entries` is length d and holds 0 outside `coverage`; `coverage` marks the
    coordinates the client selected that were also aggregated last round.
    """

    entries: np.ndarray
    coverage: np.ndarray

    @property
    def covered(self) -> int:
        return int(self.coverage.sum())


@dataclass
class FilterResult:
    """Everything the poisoning filter computed for one round."""

    retained: list[int]
    excluded_jaccard: list[int]
    excluded_cluster: list[int]
    jaccard: np.ndarray
    scores: np.ndarray
    threshold: float
    survivors: list[int] = field(default_factory=list)
    distances: Optional[np.ndarray] = None
    eps: Optional[float] = None
    min_pts: Optional[int] = None
    labels: Optional[np.ndarray] = None


# -------- Stage 1: mask structure --------
def _check_masks(masks: Sequence[SparseMask]) -> np.ndarray:
    if not masks:
        raise InvalidArgumentError("no masks given")
    counts = {m.pack_count for m in masks}
    if len(counts) != 1:
        raise InvalidArgumentError(f"masks disagree on pack_count: {sorted(counts)}")
    return np.stack([m.bits for m in masks]).astype(np.float64)


def jaccard(m_i: SparseMask, m_j: SparseMask) -> float:
    if m_i.pack_count != m_j.pack_count:
        raise InvalidArgumentError(f"pack_count mismatch: {m_i.pack_count} vs {m_j.pack_count}")
    inter = int(np.count_nonzero(m_i.bits & m_j.bits))
    union = int(np.count_nonzero(m_i.bits | m_j.bits))
    return inter / union if union else 0.0


def jaccard_matrix(masks: Sequence[SparseMask]) -> np.ndarray:
    """Pairwise pack-index Jaccard similarity, m x m."""
    bits = _check_masks(masks)
    inter = bits @ bits.T
    sizes = np.diag(inter)
    union = sizes[:, None] + sizes[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def jaccard_scores(masks: Sequence[SparseMask]) -> np.ndarray:
    """Each client's mean Jaccard similarity to every other client."""
    if len(masks) < 2:
        raise InvalidArgumentError(f"need at least 2 masks to score, got {len(masks)}")
    sim = jaccard_matrix(masks)
    m = sim.shape[0]
    return (sim.sum(axis=1) - np.diag(sim)) / (m - 1)


def jaccard_threshold(scores: Sequence[float] | np.ndarray, beta: float) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise InvalidArgumentError("no scores given")
    if beta < 0:
        raise InvalidArgumentError(f"beta must be non-negative, got {beta}")
    return float((scores.max() + scores.min()) / 2.0 * beta)


def jaccard_filter(masks: Sequence[SparseMask], beta: float) -> list[int]:
    """Indices of clients whose Jaccard score reaches the threshold."""
    scores = jaccard_scores(masks)
    threshold = jaccard_threshold(scores, beta)
    retained = np.flatnonzero(scores >= threshold).tolist()
    if not retained:
        raise DegenerateFilterError(f"Jaccard threshold {threshold:.6g} excludes every client")
    return retained


# -------- Stage 2: update direction --------
def sign_delta(
    update: SparseUpdate,
    prev_global: ParamVector,
    prev_coverage: SparseMask,
    partition: PackPartition,
) -> SignVector:
    prev_global = as_param_vector(prev_global, partition.d, name="previous global")
    if prev_coverage.pack_count != partition.pack_count:
        raise InvalidArgumentError(
            f"coverage has {prev_coverage.pack_count} packs, partition has {partition.pack_count}"
        )
    coverage = partition.expand(update.mask.bits & prev_coverage.bits)
    delta = densify(update, partition, prev_global) - prev_global
    entries = np.where(coverage, np.sign(delta), 0.0).astype(np.int8)
    return SignVector(entries=entries, coverage=coverage)


def sign_cosine(s_i: SignVector, s_j: SignVector) -> float:
    """Cosine of two sign vectors on their common coverage; 0 when undefined."""
    overlap = s_i.coverage & s_j.coverage
    a = s_i.entries[overlap].astype(np.float64)
    b = s_j.entries[overlap].astype(np.float64)
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def sign_cosine_matrix(signs: Sequence[SignVector]) -> np.ndarray:
    """All pairwise sign cosines at once; the diagonal is the self-cosine."""
    entries = np.stack([s.entries for s in signs]).astype(np.float64)
    coverage = np.stack([s.coverage for s in signs]).astype(np.float64)
    dot = entries @ entries.T
    # sq[i, j]: squared norm of client i's signs restricted to client j's coverage
    sq = (entries * entries) @ coverage.T
    denom = np.sqrt(sq * sq.T)
    cos = np.zeros_like(dot)
    np.divide(dot, denom, out=cos, where=denom > 0)
    return np.clip(cos, -1.0, 1.0)


def distance_matrix(signs: Sequence[SignVector]) -> np.ndarray:
    if not signs:
        raise InvalidArgumentError("no sign vectors given")
    dist = np.clip(1.0 - sign_cosine_matrix(signs), 0.0, 2.0)
    np.fill_diagonal(dist, 0.0)
    return dist


# -------- Density clustering --------
def neighbor_count(population: int, gamma: float, size: Optional[int] = None) -> int:
    """
    n = max(1, round(population * gamma)), capped at size - 1 so the n-th
    nearest neighbour exists.
    """
    if not 0.0 < gamma < 1.0:
        raise InvalidArgumentError(f"gamma must be in (0, 1), got {gamma}")
    n = max(1, round_half_up(population * gamma))
    if size is not None:
        n = max(1, min(n, size - 1))
    return n


def dbscan_eps(dist: np.ndarray, gamma: float, population: Optional[int] = None) -> float:
    """Mean over clients of the distance to their n-th nearest other client."""
    dist = np.asarray(dist, dtype=np.float64)
    m = dist.shape[0]
    if dist.ndim != 2 or dist.shape[1] != m or m < 2:
        raise InvalidArgumentError(f"need a square distance matrix with m >= 2, got shape {dist.shape}")
    n = neighbor_count(population or m, gamma, size=m)
    others = dist[~np.eye(m, dtype=bool)].reshape(m, m - 1)
    return float(np.sort(others, axis=1)[:, n - 1].mean())


def dbscan(dist: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """
    DBSCAN over a precomputed distance matrix. Labels are NOISE or cluster
    ids in discovery order (ascending client index).
    """
    if eps < 0:
        raise InvalidArgumentError(f"eps must be non-negative, got {eps}")
    if min_pts < 1:
        raise InvalidArgumentError(f"min_pts must be >= 1, got {min_pts}")
    model = DBSCAN(eps=max(float(eps), _MIN_EPS), min_samples=int(min_pts), metric="precomputed")
    return model.fit_predict(np.asarray(dist, dtype=np.float64)).astype(np.int64)


# -------- Composition --------
def poison_filter(
    updates: Sequence[SparseUpdate],
    prev_global: ParamVector,
    prev_coverage: SparseMask,
    partition: PackPartition,
    beta: float,
    gamma: float,
) -> FilterResult:
    """
    Two-stage poisoning filter over one round's submissions.

    Indices in the result are positions in `updates`. Clients below the
    Jaccard threshold are dropped first; the survivors are clustered on
    sign-cosine distance and every clustered client is excluded, while
    NOISE points are kept.

    Raises DegenerateFilterError (carrying the partial result) when nobody
    survives.
    """
    m = len(updates)
    if m < 2:
        raise InvalidArgumentError(f"poison filter needs at least 2 clients, got {m}")

    masks = [u.mask for u in updates]
    sim = jaccard_matrix(masks)
    scores = jaccard_scores(masks)
    threshold = jaccard_threshold(scores, beta)
    survivors = np.flatnonzero(scores >= threshold).tolist()
    excluded_jaccard = sorted(set(range(m)) - set(survivors))

    result = FilterResult(
        retained=[],
        excluded_jaccard=excluded_jaccard,
        excluded_cluster=[],
        jaccard=sim,
        scores=scores,
        threshold=threshold,
        survivors=survivors,
    )

    if len(survivors) >= 2:
        signs = [sign_delta(updates[i], prev_global, prev_coverage, partition) for i in survivors]
        dist = distance_matrix(signs)
        eps = dbscan_eps(dist, gamma, population=m)
        # min_pts stays n even when fewer survivors remain
        min_pts = neighbor_count(m, gamma)
        labels = dbscan(dist, eps, min_pts)
        result.distances = dist
        result.eps = eps
        result.min_pts = min_pts
        result.labels = labels
        result.retained = [i for i, lab in zip(survivors, labels) if lab == NOISE]
        result.excluded_cluster = [i for i, lab in zip(survivors, labels) if lab != NOISE]
    else:
        result.retained = list(survivors)

    logger.debug(
        "filter: threshold={:.4f} jaccard-excluded={} eps={} cluster-excluded={}",
        threshold, excluded_jaccard, result.eps, result.excluded_cluster,
    )
    if not result.retained:
        raise DegenerateFilterError("poison filter retained no clients", report=result)
    return result


def similarity_matrices(
    updates: Sequence[SparseUpdate],
    prev_global: ParamVector,
    prev_coverage: SparseMask,
    partition: PackPartition,
) -> tuple[np.ndarray, np.ndarray]:
    """Jaccard and sign-cosine matrices over every client, for export."""
    signs = [sign_delta(u, prev_global, prev_coverage, partition) for u in updates]
    cos = sign_cosine_matrix(signs)
    return jaccard_matrix([u.mask for u in updates]), cos
