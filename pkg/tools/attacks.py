# tools/attacks.py
# Poisoning behaviour of the attacker cohort: data-level label flipping,
# model-level value attacks, and mask coordination (index poisoning).

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from tools.errors import InvalidArgumentError
from tools.params import PackPartition, ParamVector, as_param_vector
from tools.sparsify import SparseUpdate, gather


class AttackKind(str, Enum):
    NONE = "none"
    LFA = "lfa"
    GNA = "gna"
    IPM = "ipm"
    SCALING = "scaling"
    SIGNFLIP = "signflip"

    @classmethod
    def parse(cls, value) -> AttackKind:
        if isinstance(value, cls):
            return value
        if value is None:
            return cls.NONE
        key = str(value).lower().replace("_", "").replace("-", "")
        try:
            return cls(key)
        except ValueError:
            raise InvalidArgumentError(
                f"unknown attack '{value}', expected one of {[k.value for k in cls]}"
            ) from None


class MaskMode(str, Enum):
    HONEST = "honest"
    COORDINATED = "coordinated"

    @classmethod
    def parse(cls, value) -> MaskMode:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidArgumentError(f"unknown mask_mode '{value}', expected honest or coordinated") from None


@dataclass(frozen=True)
class AttackPlan:
    """
    Who attacks, how, and from which round.

    Attackers are the first floor(attacker_ratio * m) clients unless
    `attacker_ids` lists them explicitly.
    """

    kind: AttackKind = AttackKind.NONE
    attacker_ratio: float = 0.4
    start_round: int = 10
    scale_factor: float = 10.0
    ipm_epsilon: float = 2.0
    mask_mode: MaskMode = MaskMode.HONEST
    attacker_ids: Optional[tuple[int, ...]] = None

    def attackers(self, n_clients: int) -> tuple[int, ...]:
        if self.attacker_ids is not None:
            return tuple(sorted(self.attacker_ids))
        return tuple(range(math.floor(self.attacker_ratio * n_clients)))

    def is_active(self, round_idx: int) -> bool:
        return self.kind is not AttackKind.NONE and round_idx >= self.start_round

    def active_attackers(self, n_clients: int, round_idx: int) -> tuple[int, ...]:
        """Ground-truth attacker set for a round; empty before the attack starts."""
        return self.attackers(n_clients) if self.is_active(round_idx) else ()

    def validate(self, n_clients: int) -> None:
        ids = self.attackers(n_clients)
        if self.start_round < 1:
            raise InvalidArgumentError(f"start_round must be >= 1, got {self.start_round}")
        if not 0 <= self.attacker_ratio < 0.5:
            raise InvalidArgumentError(
                f"attacker_ratio {self.attacker_ratio} breaks the threat model (attackers must be below 50% of clients)"
            )
        if len(ids) / n_clients >= 0.5:
            raise InvalidArgumentError(
                f"{len(ids)} of {n_clients} attackers breaks the threat model (attackers must be below 50% of clients)"
            )
        if any(not 0 <= i < n_clients for i in ids):
            raise InvalidArgumentError(f"attacker ids {list(ids)} outside [0, {n_clients})")


# -------- Data poisoning --------
def label_flip(label: int, num_classes: int) -> int:
    if not 0 <= label < num_classes:
        raise InvalidArgumentError(f"label {label} outside [0, {num_classes})")
    return num_classes - label - 1


def label_flip_array(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidArgumentError(f"labels outside [0, {num_classes})")
    return num_classes - labels - 1


# -------- Model poisoning --------
def gaussian_noise_update(honest_local: ParamVector, rng_seed) -> ParamVector:
    """d draws from N(mu, sigma^2) with mu, sigma taken over the honest model's entries."""
    honest_local = as_param_vector(honest_local, name="honest model")
    mu = float(honest_local.mean())
    sigma = float(honest_local.std())
    if sigma == 0.0:
        return np.full_like(honest_local, mu)
    rng = np.random.default_rng(rng_seed)
    return rng.normal(mu, sigma, size=honest_local.shape[0])


def ipm_update(colluder_honest_models: Sequence[ParamVector], epsilon: float, prev_global: ParamVector) -> ParamVector:
    """w_G - epsilon * mean colluder delta."""
    if not colluder_honest_models:
        raise InvalidArgumentError("IPM needs at least one colluder")
    prev_global = as_param_vector(prev_global, name="previous global")
    mean_delta = np.mean(np.stack(colluder_honest_models), axis=0) - prev_global
    return prev_global - epsilon * mean_delta


def scaling_update(honest_local: ParamVector, prev_global: ParamVector, factor: float) -> ParamVector:
    return prev_global + factor * (np.asarray(honest_local) - prev_global)


def sign_flip_update(honest_local: ParamVector, prev_global: ParamVector) -> ParamVector:
    return prev_global - (np.asarray(honest_local) - prev_global)


def poison_models(
    plan: AttackPlan,
    honest_models: Mapping[int, ParamVector],
    attackers: Sequence[int],
    prev_global: ParamVector,
    seeds: Mapping[int, np.random.SeedSequence],
) -> dict[int, ParamVector]:
    """
    Submitted full models for every client. Benign clients and LFA attackers
    (already poisoned through their data) pass through unchanged.
    """
    submitted = dict(honest_models)
    if not attackers or plan.kind in (AttackKind.NONE, AttackKind.LFA):
        return submitted
    if plan.kind is AttackKind.IPM:
        forged = ipm_update([honest_models[a] for a in attackers], plan.ipm_epsilon, prev_global)
        for a in attackers:
            submitted[a] = forged.copy()
        return submitted
    for a in attackers:
        if plan.kind is AttackKind.GNA:
            submitted[a] = gaussian_noise_update(honest_models[a], seeds[a])
        elif plan.kind is AttackKind.SCALING:
            submitted[a] = scaling_update(honest_models[a], prev_global, plan.scale_factor)
        elif plan.kind is AttackKind.SIGNFLIP:
            submitted[a] = sign_flip_update(honest_models[a], prev_global)
    return submitted


# -------- Index poisoning --------
def coordinate_masks(
    attacker_updates: Sequence[SparseUpdate],
    mode: MaskMode | str,
    local_models: Optional[Mapping[int, ParamVector]] = None,
    partition: Optional[PackPartition] = None,
) -> list[SparseUpdate]:
    """
    Coordinated attackers all adopt the mask of the lowest-id attacker and
    re-read their values for that mask from their full local models.
    """
    mode = MaskMode.parse(mode)
    updates = list(attacker_updates)
    if mode is MaskMode.HONEST or not updates:
        return updates
    if local_models is None or partition is None:
        raise InvalidArgumentError("coordinated masks need the attackers' full local models and the partition")
    leader = min(updates, key=lambda u: u.client_id).mask
    return [
        SparseUpdate(
            client_id=u.client_id,
            mask=leader,
            values=gather(local_models[u.client_id], leader, partition),
            dataset_size=u.dataset_size,
        )
        for u in updates
    ]
