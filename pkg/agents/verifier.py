# agents/verifier.py
# Empirical checks of the pack-level attack bound and of convergence on the
# strongly convex quadratic task.

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from loguru import logger

from agents.supervisor import prepare_experiment, run_experiment
from tools.aggregators import AggregatorKind
from tools.attacks import AttackKind, AttackPlan
from tools.config import ConvergenceConfig, ExperimentConfig, OptimizerConfig, TaskConfig
from tools.reporting import write_csv
from tools.tasks import TaskKind, client_seed, local_train

BOUND_RTOL = 1e-9
BOUND_ATOL = 1e-12


# -------- Attack bound --------
@dataclass
class BoundInstance:
    rho: float
    bound: float
    eps: float
    fp: np.ndarray
    skipped_packs: int


def bound_instance(
    values: np.ndarray,
    masks: np.ndarray,
    attackers: set[int],
    pack_size: int,
) -> BoundInstance:
    """
    rho and eps^2 * sum(f_p^2) for one instance with uniform weights.

    `values` is m x (P*s), `masks` is m x P. Packs without benign
    contributors are skipped and counted.
    """
    m, P = masks.shape
    rho = 0.0
    eps = 0.0
    fp = np.zeros(P)
    skipped = 0
    for p in range(P):
        block = values[:, p * pack_size:(p + 1) * pack_size]
        contrib = np.flatnonzero(masks[:, p])
        benign = [j for j in contrib if j not in attackers]
        hostile = [j for j in contrib if j in attackers]
        if len(contrib) == 0:
            continue
        if not benign:
            skipped += 1
            continue
        ideal = block[benign].mean(axis=0)
        live = block[contrib].mean(axis=0)
        rho += float(np.sum((live - ideal) ** 2))
        fp[p] = len(hostile) / len(contrib)
        for a in hostile:
            eps = max(eps, float(np.linalg.norm(block[a] - ideal)))
    return BoundInstance(rho=rho, bound=eps * eps * float(np.sum(fp ** 2)), eps=eps, fp=fp, skipped_packs=skipped)


@dataclass
class Theorem1Report:
    rows: pd.DataFrame
    violations: int
    skipped_packs: int
    mean_tightness: float
    equality_error: float

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.equality_error <= 1e-12


def equality_case(a: float = 3.0, b: float = -1.0) -> BoundInstance:
    """One pack, one attacker at a, one benign client at b: the bound is tight."""
    values = np.array([[a], [b]])
    masks = np.array([[True], [True]])
    return bound_instance(values, masks, {0}, pack_size=1)


def verify_theorem1(trials: int = 1000, seed: int = 0, out_dir: Optional[str | Path] = None) -> Theorem1Report:
    rng = np.random.default_rng(seed)
    rows = []
    for trial in range(trials):
        P = int(rng.integers(1, 17))
        s = int(rng.integers(1, 5))
        m = int(rng.integers(2, 11))
        n_att = int(rng.integers(0, m))
        attackers = set(range(n_att))
        masks = rng.random((m, P)) < rng.uniform(0.2, 0.9)
        empty = ~masks.any(axis=1)
        masks[empty, rng.integers(0, P, size=int(empty.sum()))] = True
        values = rng.normal(0.0, 1.0, size=(m, P * s))
        if n_att:
            values[:n_att] = rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 3.0), size=(n_att, P * s))
        inst = bound_instance(values, masks, attackers, s)
        violation = inst.rho > inst.bound * (1 + BOUND_RTOL) + BOUND_ATOL
        rows.append({
            "trial": trial, "packs": P, "pack_size": s, "clients": m, "attackers": n_att,
            "rho": inst.rho, "eps": inst.eps, "sum_fp2": float(np.sum(inst.fp ** 2)),
            "bound": inst.bound, "tightness": inst.rho / inst.bound if inst.bound > 0 else None,
            "skipped_packs": inst.skipped_packs, "violation": bool(violation),
        })

    frame = pd.DataFrame(rows)
    eq = equality_case()
    tight = frame["tightness"].dropna()
    report = Theorem1Report(
        rows=frame,
        violations=int(frame["violation"].sum()) if len(frame) else 0,
        skipped_packs=int(frame["skipped_packs"].sum()) if len(frame) else 0,
        mean_tightness=float(tight.mean()) if len(tight) else 0.0,
        equality_error=abs(eq.rho - eq.bound),
    )
    if out_dir is not None:
        write_csv(frame, Path(out_dir) / "theorem1_report.csv")
    logger.info(
        "bound check: {} trials, {} violations, {} skipped packs, mean tightness {:.4f}",
        trials, report.violations, report.skipped_packs, report.mean_tightness,
    )
    return report


# -------- Convergence --------
@dataclass
class FloorFit:
    C: float
    floor: float


def fit_floor(trajectory: np.ndarray, offset: float) -> FloorFit:
    """Least-squares fit of C / (t + a) + floor over the second half of the rounds."""
    traj = np.asarray(trajectory, dtype=np.float64)
    t = np.arange(1, traj.shape[0] + 1, dtype=np.float64)
    tail = slice(traj.shape[0] // 2, None)
    design = np.column_stack([1.0 / (t[tail] + offset), np.ones_like(t[tail])])
    (C, floor), *_ = np.linalg.lstsq(design, traj[tail], rcond=None)
    return FloorFit(C=float(C), floor=float(floor))


def convergence_config(base: ExperimentConfig, topk: float, attack: AttackKind, aggregator: AggregatorKind) -> ExperimentConfig:
    conv: ConvergenceConfig = base.convergence
    offset = conv.schedule_offset if conv.schedule_offset is not None else 8.0 * conv.L / conv.mu
    return dataclasses.replace(
        base,
        rounds=conv.rounds,
        topk_ratio=topk,
        local_epochs=1,
        task=TaskConfig(kind=TaskKind.QUADRATIC, d=conv.d, mu=conv.mu, L=conv.L, heterogeneity=conv.heterogeneity),
        attack=AttackPlan(kind=attack, attacker_ratio=conv.attacker_ratio, start_round=conv.start_round,
                          ipm_epsilon=conv.ipm_epsilon),
        aggregator=dataclasses.replace(base.aggregator, kind=aggregator),
        optimizer=OptimizerConfig(name="sgd", schedule="inverse_time", schedule_offset=offset),
    )


def dense_reference(config: ExperimentConfig) -> np.ndarray:
    """Plain FedAvg of full local models, bypassing sparsification."""
    exp = prepare_experiment(config)
    w = exp.initial_state.params
    sizes = np.array([c.size for c in exp.clients], dtype=np.float64)
    out = []
    for r in range(1, config.rounds + 1):
        local = []
        for c in exp.clients:
            rng = np.random.default_rng(client_seed(config.seed, r, c.client_id))
            local.append(local_train(exp.task, w, c, config.local_epochs, config.optimizer, rng, r).params)
        w = np.average(np.stack(local), axis=0, weights=sizes)
        diff = w - exp.task.optimum
        out.append(float(np.dot(diff, diff)))
    return np.asarray(out)


@dataclass
class Theorem2Report:
    trajectories: dict[str, np.ndarray]
    fits: dict[str, FloorFit]
    checks: dict[str, bool] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def frame(self) -> pd.DataFrame:
        rows = []
        for case, traj in self.trajectories.items():
            fit = self.fits.get(case)
            for t, value in enumerate(traj, start=1):
                rows.append({"case": case, "round": t, "dist_to_opt": value,
                             "fit_C": fit.C if fit else None, "fit_floor": fit.floor if fit else None})
        for name, passed in self.checks.items():
            rows.append({"case": f"check:{name}", "round": None, "dist_to_opt": float(passed),
                         "fit_C": None, "fit_floor": None})
        return pd.DataFrame(rows)


def verify_theorem2(config: ExperimentConfig, out_dir: Optional[str | Path] = None) -> Theorem2Report:
    """
    Four quadratic runs under the decaying SGD schedule: dense, sparse,
    IPM against SafeSparse and IPM against FedAvg.
    """
    conv = config.convergence
    cases = {
        "a_dense": convergence_config(config, 1.0, AttackKind.NONE, AggregatorKind.FEDAVG),
        "b_sparse": convergence_config(config, conv.topk_ratio, AttackKind.NONE, AggregatorKind.FEDAVG),
        "c_ipm_safesparse": convergence_config(config, conv.topk_ratio, AttackKind.IPM, AggregatorKind.SAFESPARSE),
        "d_ipm_fedavg": convergence_config(config, conv.topk_ratio, AttackKind.IPM, AggregatorKind.FEDAVG),
    }
    trajectories = {}
    for name, cfg in cases.items():
        logger.info("convergence case {}", name)
        result = run_experiment(cfg)
        trajectories[name] = np.array([r.dist_to_opt for r in result.records])
    reference = dense_reference(cases["a_dense"])

    offset = cases["a_dense"].optimizer.schedule_offset
    fits = {name: fit_floor(traj, offset) for name, traj in trajectories.items()}
    floor_b = max(fits["b_sparse"].floor, 0.0)
    final_c = float(trajectories["c_ipm_safesparse"][-1])
    final_d = float(trajectories["d_ipm_fedavg"][-1])
    checks = {
        "full_topk_matches_dense": bool(np.array_equal(trajectories["a_dense"], reference)),
        "sparse_floor_not_below_dense": fits["b_sparse"].floor >= fits["a_dense"].floor - 1e-9,
        "safesparse_floor_finite": bool(np.isfinite(fits["c_ipm_safesparse"].floor)),
        "safesparse_within_5x_sparse_floor": final_c <= 5.0 * floor_b,
        "fedavg_at_least_10x_sparse_floor": final_d >= 10.0 * floor_b,
        "safesparse_floor_below_fedavg": fits["c_ipm_safesparse"].floor < fits["d_ipm_fedavg"].floor,
    }
    report = Theorem2Report(trajectories=trajectories, fits=fits, checks=checks)
    if out_dir is not None:
        write_csv(report.frame(), Path(out_dir) / "theorem2_report.csv")
    for name, passed in checks.items():
        (logger.info if passed else logger.warning)("convergence check {}: {}", name, "ok" if passed else "FAILED")
    return report
