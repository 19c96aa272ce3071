# agents/supervisor.py

import dataclasses
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import pandas as pd
from loguru import logger

from agents.round_agent import play_round, run_round
from tools.aggregators import GlobalModelState
from tools.config import ExperimentConfig, validate_config, with_override
from tools.defense import similarity_matrices
from tools.errors import ConfigError
from tools.params import PackPartition, partition_packs
from tools.reporting import RoundRecord, matrix_frame, summarize, write_csv, write_jsonl
from tools.tasks import ClientData, Task, build_task, evaluate


@dataclass
class Experiment:
    """Everything a run needs before round 1."""

    config: ExperimentConfig
    task: Task
    clients: list[ClientData]
    partition: PackPartition
    initial_state: GlobalModelState


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    summary: dict[str, Any]


def prepare_experiment(config: ExperimentConfig) -> Experiment:
    task, clients = build_task(config.task, config.partition, config.n_clients, config.seed)
    partition = partition_packs(task.d, config.pack_size)
    initial = GlobalModelState.initial(task.init_params(config.seed), partition)
    return Experiment(config, task, clients, partition, initial)


def run_experiment(config: ExperimentConfig, out_dir: Optional[str | Path] = None) -> ExperimentResult:
    """
    Run every round of `config`. With `out_dir`, writes rounds.jsonl and
    summary.csv there.
    """
    exp = prepare_experiment(config)
    logger.info(
        "experiment: task={} d={} clients={} rounds={} aggregator={} attack={} seed={}",
        config.task.kind.value, exp.task.d, config.n_clients, config.rounds,
        config.aggregator.kind.value, config.attack.kind.value, config.seed,
    )
    state = exp.initial_state
    records: list[RoundRecord] = []
    for round_idx in range(1, config.rounds + 1):
        state, record = run_round(state, config, round_idx, exp.task, exp.clients, exp.partition)
        records.append(record)

    summary = summarize(records, evaluate(exp.initial_state.params, exp.task))
    if out_dir is not None:
        out = Path(out_dir)
        write_jsonl(records, out / "rounds.jsonl")
        write_csv(pd.DataFrame([summary]), out / "summary.csv")
    logger.info("experiment finished: {}", {k: summary[k] for k in ("final_loss", "final_accuracy", "total_bytes")})
    return ExperimentResult(records=records, summary=summary)


# -------- Sweeps --------
def sweep_cells(base: ExperimentConfig, grid: dict[str, list]) -> list[tuple[dict[str, Any], ExperimentConfig]]:
    """Cartesian product of the grid axes, one validated config per cell."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("sweep grid is empty", field="sweep.axes")
    axes = list(grid)
    cells = []
    for index, values in enumerate(itertools.product(*(grid[a] for a in axes))):
        cfg = base
        for axis, value in zip(axes, values):
            cfg = with_override(cfg, axis, value)
        if base.sweep.seed_mode == "per_cell":
            cfg = dataclasses.replace(cfg, seed=base.seed + index)
        validate_config(cfg)
        cells.append((dict(zip(axes, values)), cfg))
    return cells


def _run_cell(args: tuple[int, ExperimentConfig, Path]) -> dict[str, Any]:
    index, config, out_dir = args
    result = run_experiment(config, out_dir / "cells" / f"cell_{index:04d}")
    return result.summary


def cmd_sweep(
    base: ExperimentConfig,
    out_dir: str | Path,
    grid: Optional[dict[str, list]] = None,
    jobs: int = 1,
) -> pd.DataFrame:
    """
    Run every grid cell and write sweep.csv in long format: one row per
    (cell, metric).
    """
    out = Path(out_dir)
    cells = sweep_cells(base, grid if grid is not None else base.sweep.axes)
    logger.info("sweep: {} cells over {} with {} job(s)", len(cells), list(cells[0][0]), jobs)
    work = [(i, cfg, out) for i, (_, cfg) in enumerate(cells)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(_run_cell, work))
    else:
        summaries = [_run_cell(w) for w in work]

    rows = []
    for index, ((point, cfg), summary) in enumerate(zip(cells, summaries)):
        for metric, value in summary.items():
            rows.append({"cell": index, "seed": cfg.seed, **{k: str(v) for k, v in point.items()},
                         "metric": metric, "value": value})
    frame = pd.DataFrame(rows)
    write_csv(frame, out / "sweep.csv")
    logger.info("sweep finished: {} rows", len(frame))
    return frame


# -------- Similarity export --------
def export_similarity(config: ExperimentConfig, out_dir: str | Path, round_idx: Optional[int] = None) -> tuple[Path, Path]:
    """
    Replay the run up to `round_idx` (default: the attack start round) and
    write that round's Jaccard and sign-cosine matrices.
    """
    target = round_idx if round_idx is not None else config.attack.start_round
    if target < 1:
        raise ConfigError("export round must be >= 1", field="round")
    exp = prepare_experiment(config)
    state = exp.initial_state
    for r in range(1, target + 1):
        final = play_round(state, config, r, exp.task, exp.clients, exp.partition)
        if r == target:
            updates = final["updates"]
            jac, cos = similarity_matrices(updates, state.params, state.coverage, exp.partition)
        state = final["outcome"].state

    ids = [u.client_id for u in updates]
    out = Path(out_dir)
    jac_path = write_csv(matrix_frame(jac, ids), out / "jaccard.csv", index=True)
    cos_path = write_csv(matrix_frame(cos, ids), out / "signcos.csv", index=True)
    logger.info("similarity matrices for round {} written to {}", target, out)
    return jac_path, cos_path
