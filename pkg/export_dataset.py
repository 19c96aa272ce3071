# export_dataset.py

import argparse
from pathlib import Path

import pandas as pd
from loguru import logger

from tools.config import DEFAULT_OUT_DIR, config_from_dict, parse_config
from tools.log import configure_logging
from tools.reporting import write_csv
from tools.tasks import ClassificationTask, TaskKind, make_classification_task, partition_data


def dataset_frame(task: ClassificationTask, assignment: list) -> pd.DataFrame:
    """Train and test samples with their split, label and owning client (-1 for test)."""
    ds = task.dataset
    owner = [-1] * ds.x_train.shape[0]
    for client_id, indices in enumerate(assignment):
        for i in indices:
            owner[int(i)] = client_id
    columns = [f"x{i}" for i in range(task.features)]
    train = pd.DataFrame(ds.x_train, columns=columns)
    train.insert(0, "client", owner)
    train.insert(0, "label", ds.y_train)
    train.insert(0, "split", "train")
    test = pd.DataFrame(ds.x_test, columns=columns)
    test.insert(0, "client", -1)
    test.insert(0, "label", ds.y_test)
    test.insert(0, "split", "test")
    return pd.concat([train, test], ignore_index=True)


def export_dataset(config_path=None, out_dir=DEFAULT_OUT_DIR) -> Path:
    config = parse_config(config_path) if config_path else config_from_dict({})
    if config.task.kind is TaskKind.QUADRATIC:
        raise SystemExit("the quadratic task has no dataset to export")

    t = config.task
    task = make_classification_task(
        t.kind, t.train_samples, t.num_classes, config.seed, t.features, t.test_samples, t.hidden, t.center_scale,
    )
    split = partition_data(task.dataset.y_train, config.n_clients, config.partition.mode, config.partition.alpha, config.seed)
    path = write_csv(dataset_frame(task, split.indices), Path(out_dir) / "dataset.csv")
    logger.info("wrote {} samples to {}", task.dataset.x_train.shape[0] + task.dataset.x_test.shape[0], path)
    return path


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Export the synthetic blob dataset and its client split as CSV.")
    parser.add_argument("--config", type=Path)
    parser.add_argument("--out", type=Path, default=Path(DEFAULT_OUT_DIR))
    args = parser.parse_args()
    configure_logging()
    export_dataset(args.config, args.out)
