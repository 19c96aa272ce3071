# test/test_verifier.py

import numpy as np
import pytest

from agents.verifier import bound_instance, equality_case, fit_floor, verify_theorem1, verify_theorem2
from tools.config import config_from_dict


class TestAttackBound:
    """Test suite for the pack-level deviation bound."""

    def test_equality_case(self):
        """Should make one attacker at 3 and one benign client at -1 meet the bound exactly."""
        # Act
        inst = equality_case(3.0, -1.0)

        # Assert
        assert inst.rho == pytest.approx(4.0)
        assert inst.bound == pytest.approx(4.0)
        assert inst.fp.tolist() == [0.5]

    def test_no_attackers(self):
        """Should give rho = bound = 0 without attackers."""
        rng = np.random.default_rng(0)
        inst = bound_instance(rng.normal(size=(4, 6)), np.ones((4, 3), dtype=bool), set(), pack_size=2)
        assert inst.rho == 0.0 and inst.bound == 0.0

    def test_attacker_only_pack_is_skipped(self):
        """Should skip and count packs that only attackers selected."""
        masks = np.array([[True, True], [True, False]])
        inst = bound_instance(np.ones((2, 2)), masks, {0}, pack_size=1)
        assert inst.skipped_packs == 1

    def test_random_instances_never_violate(self, tmp_path):
        """Should find no violations over seeded random instances and write the report."""
        # Act
        report = verify_theorem1(trials=200, seed=0, out_dir=tmp_path)

        # Assert
        assert report.violations == 0
        assert report.ok
        assert len(report.rows) == 200
        assert (tmp_path / "theorem1_report.csv").exists()
        assert 0.0 < report.mean_tightness <= 1.0 + 1e-9


class TestConvergence:
    """Test suite for the quadratic convergence check."""

    def test_fit_recovers_floor(self):
        """Should recover C and the floor from an exact C/(t+a) + floor curve."""
        t = np.arange(1, 201, dtype=np.float64)
        fit = fit_floor(50.0 / (t + 80.0) + 0.02, 80.0)
        assert fit.C == pytest.approx(50.0, rel=1e-6)
        assert fit.floor == pytest.approx(0.02, abs=1e-9)

    def test_runs_all_cases_and_dense_identity(self, tmp_path):
        """Should run the four cases and match the dense reference bit for bit at full top-k."""
        # Arrange
        config = config_from_dict({
            "n_clients": 6,
            "seed": 3,
            "pack_size": 4,
            "convergence": {"rounds": 15, "d": 16, "mu": 1.0, "L": 4.0, "start_round": 5},
        })

        # Act
        report = verify_theorem2(config, tmp_path)

        # Assert
        assert set(report.trajectories) == {"a_dense", "b_sparse", "c_ipm_safesparse", "d_ipm_fedavg"}
        assert all(len(t) == 15 for t in report.trajectories.values())
        assert report.checks["full_topk_matches_dense"]
        assert report.checks["safesparse_floor_finite"]
        assert report.trajectories["a_dense"][-1] < report.trajectories["a_dense"][0]
        assert (tmp_path / "theorem2_report.csv").exists()
