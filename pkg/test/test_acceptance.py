# test/test_acceptance.py
# End-to-end runs on configs/attack_matrix.yaml. Each run is 60 rounds of
# 20 clients, so the whole module takes a few minutes.

import dataclasses
from functools import lru_cache
from pathlib import Path

import pytest

from agents.supervisor import run_experiment
from tools.config import parse_config, with_override

pytestmark = pytest.mark.slow

ATTACK_MATRIX = Path(__file__).resolve().parent.parent / "configs" / "attack_matrix.yaml"


def matrix_config(aggregator="safesparse", attack="none", beta=0.6, gamma=0.2, **fields):
    config = parse_config(ATTACK_MATRIX)
    for axis, value in (("aggregator", aggregator), ("attack", attack), ("beta", beta), ("gamma", gamma)):
        config = with_override(config, axis, value)
    return dataclasses.replace(config, **fields)


@lru_cache(maxsize=None)
def final_accuracy(aggregator: str = "safesparse", attack: str = "none", beta: float = 0.6, gamma: float = 0.2) -> float:
    return run_experiment(matrix_config(aggregator, attack, beta, gamma)).records[-1].accuracy


class TestAttackMatrix:
    """Test suite for SafeSparse against each attack on the attack matrix setting."""

    @pytest.mark.parametrize("attack", ["lfa", "gna", "ipm"])
    def test_keeps_ninety_percent_of_clean_accuracy(self, attack):
        """Should end within 10% of the attack-free accuracy."""
        assert final_accuracy(attack=attack) >= 0.9 * final_accuracy()

    def test_beats_fedavg_under_ipm(self):
        """Should finish at least 20 accuracy points above FedAvg under IPM."""
        assert final_accuracy(attack="ipm") - final_accuracy("fedavg", "ipm") >= 0.20

    def test_scaling_round_filters_like_clean_round(self):
        """Should make the same filter decisions in the first Scaling round as in the clean run."""
        # Arrange
        scaled = matrix_config(attack="scaling", rounds=10)
        clean = matrix_config(rounds=10)

        # Act
        a = run_experiment(scaled).records[-1]
        b = run_experiment(clean).records[-1]

        # Assert
        assert a.attackers == list(range(8)) and b.attackers == []
        assert a.retained == b.retained
        assert a.excluded_jaccard == b.excluded_jaccard
        assert a.excluded_cluster == b.excluded_cluster


class TestAblationShape:
    """Test suite for the beta and gamma sweeps on the attack matrix setting."""

    @pytest.mark.parametrize("attack", ["gna", "ipm"])
    @pytest.mark.parametrize("gamma", [0.45, 0.5])
    def test_large_gamma_collapses(self, attack, gamma):
        """Should lose more than half of the gamma=0.2 accuracy once gamma reaches 0.45."""
        assert final_accuracy(attack=attack, gamma=gamma) < 0.5 * final_accuracy(attack=attack)

    @pytest.mark.parametrize("attack", ["lfa", "gna", "ipm"])
    def test_beta_sweep_is_flat(self, attack):
        """Should keep every beta in 0.2..0.8 within 10% of the best cell, and the best cell near clean accuracy."""
        # Act
        cells = [final_accuracy(attack=attack, beta=beta) for beta in (0.2, 0.4, 0.6, 0.8)]

        # Assert
        best = max(cells)
        assert min(cells) >= 0.9 * best
        assert best >= 0.9 * final_accuracy()
