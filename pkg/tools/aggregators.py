# tools/aggregators.py
# Sparse pack-level aggregation and the dense robust baselines it is compared
# against.

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Optional, Sequence

import numpy as np
from loguru import logger

from tools.defense import FilterResult, poison_filter
from tools.errors import DegenerateFilterError, InvalidArgumentError
from tools.params import PackPartition, ParamVector, densify
from tools.sparsify import SparseMask, SparseUpdate

if TYPE_CHECKING:
    from tools.config import AggregatorConfig

WEISZFELD_SMOOTHING = 1e-8


class AggregatorKind(str, Enum):
    SAFESPARSE = "safesparse"
    FEDAVG = "fedavg"
    MULTIKRUM = "multikrum"
    MEDIAN = "median"
    TRIMMEDMEAN = "trimmedmean"
    RFA = "rfa"

    @classmethod
    def parse(cls, value: str | AggregatorKind) -> AggregatorKind:
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "").replace("-", "")
        try:
            return cls(key)
        except ValueError:
            raise InvalidArgumentError(
                f"unknown aggregator '{value}', expected one of {[k.value for k in cls]}"
            ) from None


@dataclass(frozen=True)
class GlobalModelState:
    """Global parameters, the packs updated by the last aggregation, and its round."""

    params: np.ndarray
    coverage: SparseMask
    round: int = 0

    @classmethod
    def initial(cls, params: ParamVector, partition: PackPartition) -> GlobalModelState:
        # Everything counts as covered before the first aggregation.
        return cls(params=np.asarray(params, dtype=np.float64), coverage=SparseMask.full(partition.pack_count), round=0)


@dataclass
class AggregationOutcome:
    state: GlobalModelState
    retained: list[int]
    excluded_jaccard: list[int] = field(default_factory=list)
    excluded_cluster: list[int] = field(default_factory=list)
    degenerate: bool = False
    filter: Optional[FilterResult] = None
    notes: dict[str, Any] = field(default_factory=dict)


# -------- SafeSparse --------
def merge_sparse(
    updates: Sequence[SparseUpdate],
    indices: Sequence[int],
    prev_params: ParamVector,
    partition: PackPartition,
    weight_denominator: str = "all",
) -> tuple[np.ndarray, SparseMask]:
    """
    Per-pack weighted mean over the contributors among `indices`.

    Client weights are |D_j| over the summed sizes of all submissions
    ("all") or of the retained ones ("retained"); within each pack they are
    renormalised by the pack's total contributor weight. Packs without
    contributors keep `prev_params`.
    """
    if weight_denominator not in ("all", "retained"):
        raise InvalidArgumentError(f"weight_denominator must be 'all' or 'retained', got '{weight_denominator}'")
    prev_params = np.asarray(prev_params, dtype=np.float64)
    indices = list(indices)
    if not indices:
        return prev_params.copy(), SparseMask.empty(partition.pack_count)

    sizes = np.array([u.dataset_size for u in updates], dtype=np.float64)
    denom = sizes.sum() if weight_denominator == "all" else sizes[indices].sum()
    chosen = [updates[i] for i in indices]
    values = np.stack([densify(u, partition, prev_params) for u in chosen])
    packs = np.stack([u.mask.bits for u in chosen])
    selected = partition.expand(packs)

    weights = np.where(selected, (sizes[indices] / denom)[:, None], 0.0)
    total = weights.sum(axis=0)
    has_contrib = total > 0

    # Shifted mean: identical contributor values come back bit-exact.
    first = np.argmax(selected, axis=0)
    ref = values[first, np.arange(partition.d)]
    coeff = np.zeros_like(weights)
    np.divide(weights, total, out=coeff, where=has_contrib)
    merged = ref + (coeff * (values - ref)).sum(axis=0)

    params = np.where(has_contrib, merged, prev_params)
    return params, SparseMask(packs.any(axis=0))


def safesparse_aggregate(
    updates: Sequence[SparseUpdate],
    prev_state: GlobalModelState,
    partition: PackPartition,
    beta: float,
    gamma: float,
    weight_denominator: str = "all",
) -> GlobalModelState:
    """
    Filter, then merge the benign submissions pack by pack.

    DegenerateFilterError propagates; `aggregate_round` turns it into the
    fail-open fallback.
    """
    if not updates:
        raise InvalidArgumentError("need at least one update")
    if len(updates) >= 2:
        benign = poison_filter(updates, prev_state.params, prev_state.coverage, partition, beta, gamma).retained
    else:
        benign = [0]
    params, coverage = merge_sparse(updates, benign, prev_state.params, partition, weight_denominator)
    return GlobalModelState(params=params, coverage=coverage, round=prev_state.round + 1)


# -------- Dense baselines --------
def _stack(dense_updates: Sequence[ParamVector] | np.ndarray) -> np.ndarray:
    stacked = np.asarray(dense_updates, dtype=np.float64)
    if stacked.ndim != 2 or stacked.shape[0] < 1:
        raise InvalidArgumentError(f"expected an m x d stack of updates, got shape {stacked.shape}")
    return stacked


def fedavg(dense_updates, dataset_sizes) -> ParamVector:
    stacked = _stack(dense_updates)
    return np.average(stacked, axis=0, weights=np.asarray(dataset_sizes, dtype=np.float64))


def coord_median(dense_updates) -> ParamVector:
    return np.median(_stack(dense_updates), axis=0)


def trimmed_mean(dense_updates, trim_pct: float) -> ParamVector:
    """Drop floor(m*trim_pct/100) values from each end of every coordinate."""
    stacked = _stack(dense_updates)
    if not 0 <= trim_pct < 100:
        raise InvalidArgumentError(f"trim_pct must be in [0, 100), got {trim_pct}")
    m = stacked.shape[0]
    t = math.floor(m * trim_pct / 100)
    if m - 2 * t < 1:
        logger.warning("trimmed mean: trimming {} of {} from each end leaves nothing, using plain mean", t, m)
        return stacked.mean(axis=0)
    return np.sort(stacked, axis=0)[t:m - t].mean(axis=0)


# other-update distances Krum leaves out; "paper" counts the zero self-distance
KRUM_NEIGHBOR_COUNTS = {"classic": 2, "paper": 2, "extended": 1}


def krum_scores(dense_updates, n_attackers_bound: int, neighbor_count: str = "classic") -> np.ndarray:
    """
    Sum of squared distances to the closest other updates: m-n-2 of them for
    "classic" and "paper", m-n-1 for "extended".
    """
    stacked = _stack(dense_updates)
    m = stacked.shape[0]
    if m <= n_attackers_bound + 2:
        raise InvalidArgumentError(f"Multi-Krum needs m > n + 2, got m={m}, n={n_attackers_bound}")
    if neighbor_count not in KRUM_NEIGHBOR_COUNTS:
        raise InvalidArgumentError(
            f"krum neighbor_count must be one of {sorted(KRUM_NEIGHBOR_COUNTS)}, got '{neighbor_count}'"
        )
    count = m - n_attackers_bound - KRUM_NEIGHBOR_COUNTS[neighbor_count]
    diff = stacked[:, None, :] - stacked[None, :, :]
    sq = (diff * diff).sum(axis=-1)
    others = sq[~np.eye(m, dtype=bool)].reshape(m, m - 1)
    return np.sort(others, axis=1)[:, :count].sum(axis=1)


def krum_select(dense_updates, n_attackers_bound: int, k_select: int, neighbor_count: str = "classic") -> np.ndarray:
    scores = krum_scores(dense_updates, n_attackers_bound, neighbor_count)
    if not 1 <= k_select <= scores.shape[0]:
        raise InvalidArgumentError(f"k_select must be in [1, {scores.shape[0]}], got {k_select}")
    return np.sort(np.argsort(scores, kind="stable")[:k_select])


def multi_krum(
    dense_updates,
    n_attackers_bound: int,
    k_select: int,
    dataset_sizes: Optional[Sequence[int]] = None,
    neighbor_count: str = "classic",
) -> ParamVector:
    stacked = _stack(dense_updates)
    chosen = krum_select(stacked, n_attackers_bound, k_select, neighbor_count)
    sizes = np.ones(stacked.shape[0]) if dataset_sizes is None else np.asarray(dataset_sizes, dtype=np.float64)
    return np.average(stacked[chosen], axis=0, weights=sizes[chosen])


@dataclass
class WeiszfeldResult:
    point: np.ndarray
    iterations: int
    converged: bool
    objectives: list[float]

    @property
    def monotone(self) -> bool:
        obj = np.asarray(self.objectives)
        return bool(np.all(np.diff(obj) <= 1e-12 * np.maximum(1.0, obj[:-1])))


def geomedian_objective(points: np.ndarray, weights: np.ndarray, z: np.ndarray) -> float:
    return float(np.dot(weights, np.linalg.norm(points - z, axis=1)))


def rfa_geomedian(
    dense_updates,
    weights: Optional[Sequence[float]] = None,
    tol: float = 1e-6,
    max_iters: int = 100,
) -> WeiszfeldResult:
    """Smoothed Weiszfeld iteration started from the weighted mean."""
    points = _stack(dense_updates)
    w = np.ones(points.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    z = w @ points
    objectives = [geomedian_objective(points, w, z)]
    for it in range(1, max_iters + 1):
        dist = np.maximum(np.linalg.norm(points - z, axis=1), WEISZFELD_SMOOTHING)
        beta = w / dist
        z_next = beta @ points / beta.sum()
        step = float(np.linalg.norm(z_next - z))
        z = z_next
        objectives.append(geomedian_objective(points, w, z))
        if step < tol:
            return WeiszfeldResult(point=z, iterations=it, converged=True, objectives=objectives)
    logger.warning("Weiszfeld did not converge in {} iterations", max_iters)
    return WeiszfeldResult(point=z, iterations=max_iters, converged=False, objectives=objectives)


# -------- Dispatch --------
def aggregate_round(
    kind: AggregatorKind | str,
    updates: Sequence[SparseUpdate],
    prev_state: GlobalModelState,
    partition: PackPartition,
    config: AggregatorConfig,
    byzantine_bound: int = 0,
    restrict_to: Optional[Sequence[int]] = None,
) -> AggregationOutcome:
    """
    One server aggregation.

    `restrict_to` runs the aggregator over a fixed subset of `updates` with
    no filtering (the shadow benign aggregation). Index lists in the outcome
    are positions in `updates`.
    """
    kind = AggregatorKind.parse(kind)
    if not updates:
        raise InvalidArgumentError("need at least one update")
    m = len(updates)
    next_round = prev_state.round + 1

    if kind is AggregatorKind.SAFESPARSE:
        if restrict_to is not None:
            indices = sorted(restrict_to)
            params, coverage = merge_sparse(updates, indices, prev_state.params, partition, config.weight_denominator)
            return AggregationOutcome(GlobalModelState(params, coverage, next_round), retained=indices)
        outcome = AggregationOutcome(state=prev_state, retained=list(range(m)))
        if m >= 2:
            try:
                found = poison_filter(updates, prev_state.params, prev_state.coverage, partition, config.beta, config.gamma)
            except DegenerateFilterError as exc:
                # fail open: keep everyone for this round
                logger.warning("round {}: {}; aggregating over all {} clients", next_round, exc, m)
                outcome.filter = exc.report
                outcome.degenerate = True
            else:
                outcome.filter = found
                outcome.retained = list(found.retained)
                outcome.excluded_jaccard = list(found.excluded_jaccard)
                outcome.excluded_cluster = list(found.excluded_cluster)
        params, coverage = merge_sparse(
            updates, outcome.retained, prev_state.params, partition, config.weight_denominator
        )
        outcome.state = GlobalModelState(params, coverage, next_round)
        return outcome

    indices = sorted(restrict_to) if restrict_to is not None else list(range(m))
    subset = [updates[i] for i in indices]
    dense = np.stack([densify(u, partition, prev_state.params) for u in subset])
    sizes = np.array([u.dataset_size for u in subset], dtype=np.float64)
    coverage = SparseMask(np.any([u.mask.bits for u in subset], axis=0))
    notes: dict[str, Any] = {}
    retained = list(indices)

    if kind is AggregatorKind.FEDAVG:
        params = fedavg(dense, sizes)
    elif kind is AggregatorKind.MEDIAN:
        params = coord_median(dense)
    elif kind is AggregatorKind.TRIMMEDMEAN:
        t = math.floor(len(subset) * config.trim_pct / 100)
        notes["trim_underflow"] = len(subset) - 2 * t < 1
        params = trimmed_mean(dense, config.trim_pct)
    elif kind is AggregatorKind.MULTIKRUM:
        n = byzantine_bound
        k_select = config.krum_select if config.krum_select is not None else len(subset) - n
        chosen = krum_select(dense, n, k_select, config.krum_neighbor_count)
        params = np.average(dense[chosen], axis=0, weights=sizes[chosen])
        retained = [indices[i] for i in chosen]
        coverage = SparseMask(np.any([subset[i].mask.bits for i in chosen], axis=0))
    elif kind is AggregatorKind.RFA:
        found = rfa_geomedian(dense, sizes, tol=config.rfa_tol, max_iters=config.rfa_max_iters)
        params = found.point
        notes["weiszfeld_iterations"] = found.iterations
        notes["weiszfeld_converged"] = found.converged
    else:
        raise InvalidArgumentError(f"unhandled aggregator {kind}")

    return AggregationOutcome(
        state=GlobalModelState(params=params, coverage=coverage, round=next_round),
        retained=retained,
        notes=notes,
    )
