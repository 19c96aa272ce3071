# test/conftest.py

import pytest

from tools.config import config_from_dict


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute end-to-end runs (deselect with -m \"not slow\")")


@pytest.fixture
def small_config():
    """Factory for a tiny logistic-regression experiment (6 clients, d=15)."""

    def build(**overrides):
        raw = {
            "n_clients": 6,
            "rounds": 3,
            "seed": 7,
            "pack_size": 4,
            "topk_ratio": 0.5,
            "task": {"kind": "logistic", "num_classes": 3, "features": 4, "train_samples": 120, "test_samples": 30},
            "partition": {"mode": "iid"},
        }
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(raw.get(key), dict):
                raw[key] = {**raw[key], **value}
            else:
                raw[key] = value
        return config_from_dict(raw)

    return build
