# agents/client.py
# Client phase of a round: local training (with label flipping for active
# LFA attackers) and top-k sparsification of the submitted models.

from typing import Mapping, Sequence

import numpy as np

from tools.attacks import AttackKind, AttackPlan
from tools.config import ExperimentConfig
from tools.params import PackPartition
from tools.sparsify import SparseUpdate, sparsify_update
from tools.tasks import ClientData, Task, client_seed, local_train


def train_client(
    task: Task,
    client: ClientData,
    global_params: np.ndarray,
    config: ExperimentConfig,
    round_idx: int,
    flip_labels: bool = False,
) -> np.ndarray:
    rng = np.random.default_rng(client_seed(config.seed, round_idx, client.client_id))
    data = client.flipped(task.num_classes) if flip_labels else client
    result = local_train(task, global_params, data, config.local_epochs, config.optimizer, rng, round_idx)
    return result.params


def train_all(
    task: Task,
    clients: Sequence[ClientData],
    global_params: np.ndarray,
    config: ExperimentConfig,
    round_idx: int,
    attackers: Sequence[int] = (),
) -> dict[int, np.ndarray]:
    """Local models of every client, keyed by client id."""
    plan: AttackPlan = config.attack
    flip = set(attackers) if plan.kind is AttackKind.LFA else set()
    return {
        c.client_id: train_client(task, c, global_params, config, round_idx, c.client_id in flip)
        for c in clients
    }


def sparsify_all(
    models: Mapping[int, np.ndarray],
    clients: Sequence[ClientData],
    prev_global: np.ndarray,
    partition: PackPartition,
    ratio: float,
) -> list[SparseUpdate]:
    """One submission per client, ordered by client id."""
    return [
        sparsify_update(models[c.client_id], prev_global, partition, ratio, c.client_id, c.size)
        for c in sorted(clients, key=lambda c: c.client_id)
    ]
