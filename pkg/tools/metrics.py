# tools/metrics.py
# Per-round measurements: attack effectiveness, per-pack malicious
# contributor ratios, detection quality and uplink accounting.

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.metrics import precision_score, recall_score

from tools.params import PackPartition, ParamVector
from tools.sparsify import SparseMask, SparseUpdate, payload_size


def attack_effectiveness(poisoned_global: ParamVector, benign_ideal: ParamVector) -> float:
    """rho: squared distance between the live and the benign-only global model."""
    diff = np.asarray(poisoned_global, dtype=np.float64) - np.asarray(benign_ideal, dtype=np.float64)
    return float(np.dot(diff, diff))


def fp_ratios(
    masks: Sequence[SparseMask],
    retained: Iterable[int],
    attackers: Iterable[int],
    pack_count: Optional[int] = None,
) -> np.ndarray:
    """
    Share of each pack's retained contributors that are attackers; 0 for
    packs nobody retained contributed to.
    """
    retained = sorted(set(retained))
    pack_count = pack_count if pack_count is not None else masks[0].pack_count
    if not retained:
        return np.zeros(pack_count)
    bits = np.stack([masks[i].bits for i in retained])
    is_attacker = np.isin(retained, list(attackers))
    total = bits.sum(axis=0)
    hostile = bits[is_attacker].sum(axis=0)
    out = np.zeros(pack_count)
    np.divide(hostile, total, out=out, where=total > 0)
    return out


def detection_scores(excluded: Iterable[int], attackers: Iterable[int], m: int) -> tuple[Optional[float], Optional[float]]:
    """
    Precision and recall of "excluded" as a prediction of "attacker".
    Both are None when the round has no attackers.
    """
    attackers = set(attackers)
    if not attackers:
        return None, None
    excluded = set(excluded)
    y_true = [i in attackers for i in range(m)]
    y_pred = [i in excluded for i in range(m)]
    return (
        float(precision_score(y_true, y_pred, zero_division=0)),
        float(recall_score(y_true, y_pred, zero_division=0)),
    )


def uplink_bytes(updates: Sequence[SparseUpdate], partition: PackPartition) -> int:
    return sum(payload_size(partition.pack_count, u.mask.popcount, partition.pack_size) for u in updates)
