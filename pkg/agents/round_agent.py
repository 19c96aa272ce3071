# agents/round_agent.py

import dataclasses
from typing import Any

import numpy as np
from langgraph.graph import END, StateGraph
from loguru import logger
from typing_extensions import TypedDict

from agents.client import sparsify_all, train_all
from tools.aggregators import AggregationOutcome, GlobalModelState, aggregate_round
from tools.attacks import AttackKind, MaskMode, coordinate_masks, poison_models
from tools.config import ExperimentConfig
from tools.metrics import attack_effectiveness, detection_scores, fp_ratios, uplink_bytes
from tools.params import PackPartition
from tools.reporting import RoundRecord, format_record
from tools.sparsify import SparseUpdate
from tools.tasks import STREAM_ATTACK, ClientData, Task, client_seed, evaluate


# -------- Round State --------
class RoundState(TypedDict, total=False):
    # inputs
    config: ExperimentConfig
    task: Task
    clients: list[ClientData]
    partition: PackPartition
    global_state: GlobalModelState
    round_idx: int
    attackers: tuple[int, ...]
    # produced by the nodes
    honest_models: dict[int, np.ndarray]
    submitted_models: dict[int, np.ndarray]
    updates: list[SparseUpdate]
    outcome: AggregationOutcome
    ideal_state: GlobalModelState
    metrics: dict[str, Any]
    record: RoundRecord


# -------- Node 1: Local Training --------
def train_clients_node(state: RoundState) -> RoundState:
    """Every client trains from the broadcast global model."""
    models = train_all(
        state["task"], state["clients"], state["global_state"].params,
        state["config"], state["round_idx"], state["attackers"],
    )
    return {"honest_models": models, "submitted_models": models}


# -------- Node 2: Model Poisoning --------
def poison_updates_node(state: RoundState) -> RoundState:
    """Active attackers replace their models."""
    config = state["config"]
    seeds = {a: client_seed(config.seed, state["round_idx"], a, stream=STREAM_ATTACK) for a in state["attackers"]}
    submitted = poison_models(
        config.attack, state["honest_models"], state["attackers"], state["global_state"].params, seeds,
    )
    return {"submitted_models": submitted}


# -------- Node 3: Sparsification --------
def sparsify_clients_node(state: RoundState) -> RoundState:
    updates = sparsify_all(
        state["submitted_models"], state["clients"], state["global_state"].params,
        state["partition"], state["config"].topk_ratio,
    )
    return {"updates": updates}


# -------- Node 4: Index Poisoning --------
def coordinate_masks_node(state: RoundState) -> RoundState:
    """Attackers share the lowest-id attacker's mask."""
    attackers = set(state["attackers"])
    updates = state["updates"]
    forged = coordinate_masks(
        [u for u in updates if u.client_id in attackers],
        MaskMode.COORDINATED,
        state["submitted_models"],
        state["partition"],
    )
    by_id = {u.client_id: u for u in forged}
    return {"updates": [by_id.get(u.client_id, u) for u in updates]}


# -------- Node 5: Aggregation --------
def aggregate_updates_node(state: RoundState) -> RoundState:
    config = state["config"]
    outcome = aggregate_round(
        config.aggregator.kind, state["updates"], state["global_state"], state["partition"],
        config.aggregator, byzantine_bound=config.byzantine_bound(),
    )
    return {"outcome": outcome}


# -------- Node 6: Shadow Aggregation --------
def shadow_aggregate_node(state: RoundState) -> RoundState:
    """Same aggregator over the ground-truth benign clients only."""
    config = state["config"]
    attackers = set(state["attackers"])
    benign = [i for i, u in enumerate(state["updates"]) if u.client_id not in attackers]
    shadow_cfg = dataclasses.replace(config.aggregator, krum_select=None)
    ideal = aggregate_round(
        config.aggregator.kind, state["updates"], state["global_state"], state["partition"],
        shadow_cfg, byzantine_bound=0, restrict_to=benign,
    )
    return {"ideal_state": ideal.state}


# -------- Node 7: Evaluation --------
def evaluate_model_node(state: RoundState) -> RoundState:
    return {"metrics": evaluate(state["outcome"].state.params, state["task"])}


# -------- Node 8: Record --------
def build_record_node(state: RoundState) -> RoundState:
    updates = state["updates"]
    outcome = state["outcome"]
    metrics = state["metrics"]
    attackers = list(state["attackers"])
    ids = [u.client_id for u in updates]
    retained = [ids[i] for i in outcome.retained]
    excluded = sorted(set(ids) - set(retained))
    precision, recall = detection_scores(excluded, attackers, len(ids))
    masks = [u.mask for u in updates]
    record = RoundRecord(
        round=state["round_idx"],
        loss=metrics["loss"],
        accuracy=metrics["accuracy"],
        top5_accuracy=metrics["top5_accuracy"],
        dist_to_opt=metrics["dist_to_opt"],
        retained=retained,
        excluded_jaccard=[ids[i] for i in outcome.excluded_jaccard],
        excluded_cluster=[ids[i] for i in outcome.excluded_cluster],
        precision=precision,
        recall=recall,
        f_p=fp_ratios(masks, outcome.retained, [ids.index(a) for a in attackers]).tolist(),
        rho=attack_effectiveness(outcome.state.params, state["ideal_state"].params),
        bytes_uplink=uplink_bytes(updates, state["partition"]),
        degenerate_filter=outcome.degenerate,
        attackers=attackers,
    )
    logger.info(format_record(record))
    return {"record": record}


# -------- Routing --------
MODEL_ATTACKS = (AttackKind.GNA, AttackKind.IPM, AttackKind.SCALING, AttackKind.SIGNFLIP)


def route_after_training(state: RoundState) -> str:
    if state["attackers"] and state["config"].attack.kind in MODEL_ATTACKS:
        return "poison_updates"
    return "sparsify_clients"


def route_after_sparsify(state: RoundState) -> str:
    if state["attackers"] and state["config"].attack.mask_mode is MaskMode.COORDINATED:
        return "coordinate_masks"
    return "aggregate_updates"


def build_graph():
    """Build the per-round LangGraph workflow."""

    workflow = StateGraph(RoundState)

    workflow.add_node("train_clients", train_clients_node)
    workflow.add_node("poison_updates", poison_updates_node)
    workflow.add_node("sparsify_clients", sparsify_clients_node)
    workflow.add_node("coordinate_masks", coordinate_masks_node)
    workflow.add_node("aggregate_updates", aggregate_updates_node)
    workflow.add_node("shadow_aggregate", shadow_aggregate_node)
    workflow.add_node("evaluate_model", evaluate_model_node)
    workflow.add_node("build_record", build_record_node)

    workflow.set_entry_point("train_clients")
    workflow.add_conditional_edges(
        "train_clients", route_after_training,
        {"poison_updates": "poison_updates", "sparsify_clients": "sparsify_clients"},
    )
    workflow.add_edge("poison_updates", "sparsify_clients")
    workflow.add_conditional_edges(
        "sparsify_clients", route_after_sparsify,
        {"coordinate_masks": "coordinate_masks", "aggregate_updates": "aggregate_updates"},
    )
    workflow.add_edge("coordinate_masks", "aggregate_updates")
    workflow.add_edge("aggregate_updates", "shadow_aggregate")
    workflow.add_edge("shadow_aggregate", "evaluate_model")
    workflow.add_edge("evaluate_model", "build_record")
    workflow.add_edge("build_record", END)

    return workflow.compile()


# Create the compiled graph
round_graph = build_graph()


# ========================================
# MAIN FUNCTION
# ========================================

def play_round(
    global_state: GlobalModelState,
    config: ExperimentConfig,
    round_idx: int,
    task: Task,
    clients: list[ClientData],
    partition: PackPartition,
) -> RoundState:
    """Run one round through the graph and return its final state."""
    attackers = config.attack.active_attackers(config.n_clients, round_idx)
    initial_state: RoundState = {
        "config": config,
        "task": task,
        "clients": clients,
        "partition": partition,
        "global_state": global_state,
        "round_idx": round_idx,
        "attackers": attackers,
    }
    return round_graph.invoke(initial_state)


def run_round(
    global_state: GlobalModelState,
    config: ExperimentConfig,
    round_idx: int,
    task: Task,
    clients: list[ClientData],
    partition: PackPartition,
) -> tuple[GlobalModelState, RoundRecord]:
    final_state = play_round(global_state, config, round_idx, task, clients, partition)
    return final_state["outcome"].state, final_state["record"]
