# tools/tasks.py
# Desk-scale learning tasks: a strongly convex quadratic convergence run and Gaussian
# blob classification (multinomial logistic regression or a tanh MLP), plus
# data partitioning, local training and evaluation.

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Any, Optional, Union

import numpy as np
from loguru import logger

from tools.attacks import label_flip_array
from tools.errors import InvalidArgumentError
from tools.params import ParamVector, as_param_vector

if TYPE_CHECKING:
    from tools.config import OptimizerConfig, PartitionConfig, TaskConfig

# SeedSequence stream tags; every random draw in a run hangs off one of them.
STREAM_TASK = 0
STREAM_PARTITION = 1
STREAM_INIT = 2
STREAM_CLIENT = 3
STREAM_ATTACK = 4

MIN_CENTER_SEPARATION = 4.0  # in units of the within-cluster std


class TaskKind(str, Enum):
    QUADRATIC = "quadratic"
    LOGISTIC = "logistic"
    TINYMLP = "tinymlp"

    @classmethod
    def parse(cls, value) -> TaskKind:
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "").replace("-", "")
        try:
            return cls(key)
        except ValueError:
            raise InvalidArgumentError(
                f"unknown task '{value}', expected one of {[k.value for k in cls]}"
            ) from None


class PartitionMode(str, Enum):
    IID = "iid"
    DIRICHLET = "dirichlet"

    @classmethod
    def parse(cls, value) -> PartitionMode:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidArgumentError(f"unknown partition mode '{value}', expected iid or dirichlet") from None


def client_seed(seed: int, round_idx: int, client_id: int, stream: int = STREAM_CLIENT) -> np.random.SeedSequence:
    """Per-client random stream, independent of execution order."""
    return np.random.SeedSequence([int(seed), int(stream), int(round_idx), int(client_id)])


# -------- Data --------
@dataclass(frozen=True, eq=False)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int


@dataclass(frozen=True, eq=False)
class ClientData:
    """A client's local training data. Quadratic clients carry no samples."""

    client_id: int
    x: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    size: int = 0

    def flipped(self, num_classes: int) -> ClientData:
        return ClientData(self.client_id, self.x, label_flip_array(self.y, num_classes), self.size)


@dataclass(frozen=True, eq=False)
class DataPartition:
    indices: list[np.ndarray]
    mode: PartitionMode
    alpha: float

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.indices]


def make_blobs(
    num_samples: int,
    num_classes: int,
    features: int,
    rng: np.random.Generator,
    center_scale: float = 3.0,
    centers: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Stratified unit-variance Gaussian clusters. Centers are redrawn until
    every pair sits at least MIN_CENTER_SEPARATION apart.
    """
    if centers is None:
        for _ in range(1000):
            centers = rng.normal(0.0, center_scale, size=(num_classes, features))
            gaps = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
            if gaps[~np.eye(num_classes, dtype=bool)].min() >= MIN_CENTER_SEPARATION:
                break
        else:
            raise InvalidArgumentError(
                f"could not place {num_classes} centers {MIN_CENTER_SEPARATION} apart in {features} dims"
            )
    labels = rng.permutation(np.arange(num_samples) % num_classes)
    x = centers[labels] + rng.standard_normal((num_samples, features))
    return x, labels.astype(np.int64), centers


def partition_data(
    labels: np.ndarray,
    n_clients: int,
    mode: PartitionMode | str,
    alpha: float = 1.0,
    seed: int = 0,
    max_redraws: int = 10,
) -> DataPartition:
    """
    Split sample indices among clients.

    IID deals each class round-robin so every client gets an equal, nearly
    uniform share. Dirichlet splits every class by proportions drawn from
    Dir(alpha); empty clients trigger a redraw, and after `max_redraws` one
    sample is moved from the largest client instead.
    """
    mode = PartitionMode.parse(mode)
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n_clients < 1 or n_clients > n:
        raise InvalidArgumentError(f"cannot split {n} samples among {n_clients} clients")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_PARTITION]))
    classes = np.unique(labels)

    if mode is PartitionMode.IID:
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in classes])
        parts = [np.sort(order[k::n_clients]) for k in range(n_clients)]
        return DataPartition(parts, mode, alpha)

    if alpha <= 0:
        raise InvalidArgumentError(f"Dirichlet alpha must be positive, got {alpha}")
    for _ in range(max_redraws):
        buckets: list[list[int]] = [[] for _ in range(n_clients)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(n_clients, alpha))
            cuts = np.rint(np.cumsum(props) * len(idx)).astype(np.int64)[:-1]
            for k, chunk in enumerate(np.split(idx, cuts)):
                buckets[k].extend(chunk.tolist())
        if all(buckets):
            break
    else:
        logger.debug("Dirichlet split left empty clients after {} draws, rebalancing", max_redraws)
        for k in range(n_clients):
            if not buckets[k]:
                donor = max(range(n_clients), key=lambda j: len(buckets[j]))
                buckets[k].append(buckets[donor].pop())
    return DataPartition([np.sort(np.asarray(b, dtype=np.int64)) for b in buckets], mode, alpha)


# -------- Tasks --------
@dataclass(frozen=True, eq=False)
class QuadraticTask:
    """
    f(w) = 1/2 (w - w*)^T H (w - w*) with diagonal H; client i minimises
    f(w) + b_i^T w where the b_i sum to zero.
    """

    hessian: np.ndarray
    optimum: np.ndarray
    offsets: np.ndarray
    mu: float
    L: float
    kind: TaskKind = TaskKind.QUADRATIC

    @property
    def d(self) -> int:
        return int(self.optimum.shape[0])

    @property
    def num_classes(self) -> Optional[int]:
        return None

    def loss(self, w: ParamVector) -> float:
        diff = w - self.optimum
        return float(0.5 * np.dot(self.hessian * diff, diff))

    def gradient(self, w: ParamVector) -> np.ndarray:
        return self.hessian * (w - self.optimum)

    def client_loss(self, w: ParamVector, client_id: int) -> float:
        return self.loss(w) + float(np.dot(self.offsets[client_id], w))

    def client_gradient(self, w: ParamVector, client_id: int) -> np.ndarray:
        return self.gradient(w) + self.offsets[client_id]

    def init_params(self, seed: int) -> np.ndarray:
        return np.zeros(self.d)


def make_quadratic_task(
    d: int,
    mu: float,
    L: float,
    seed: int,
    n_clients: int = 20,
    heterogeneity: float = 1.0,
) -> QuadraticTask:
    if d < 1:
        raise InvalidArgumentError(f"dimension must be positive, got {d}")
    if not 0 < mu <= L:
        raise InvalidArgumentError(f"need 0 < mu <= L, got mu={mu}, L={L}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_TASK]))
    hessian = rng.uniform(mu, L, size=d)
    optimum = rng.standard_normal(d)
    offsets = heterogeneity * rng.standard_normal((n_clients, d))
    offsets -= offsets.mean(axis=0)
    return QuadraticTask(hessian=hessian, optimum=optimum, offsets=offsets, mu=float(mu), L=float(L))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(y.shape[0]), y]))


@dataclass(frozen=True, eq=False)
class ClassificationTask:
    """
    Softmax classifier on Gaussian blobs.

    Parameter layout, flattened in order: logistic is W (F x M), b (M);
    the MLP is W1 (F x H), b1 (H), W2 (H x M), b2 (M) with tanh hidden units.
    """

    kind: TaskKind
    dataset: Dataset
    features: int
    hidden: int = 32

    @property
    def num_classes(self) -> int:
        return self.dataset.num_classes

    @property
    def d(self) -> int:
        f, h, m = self.features, self.hidden, self.num_classes
        if self.kind is TaskKind.LOGISTIC:
            return f * m + m
        return f * h + h + h * m + m

    def _unpack(self, w: ParamVector) -> list[np.ndarray]:
        f, h, m = self.features, self.hidden, self.num_classes
        shapes = [(f, m), (m,)] if self.kind is TaskKind.LOGISTIC else [(f, h), (h,), (h, m), (m,)]
        out, offset = [], 0
        for shape in shapes:
            size = int(np.prod(shape))
            out.append(w[offset:offset + size].reshape(shape))
            offset += size
        return out

    def logits(self, w: ParamVector, x: np.ndarray) -> np.ndarray:
        if self.kind is TaskKind.LOGISTIC:
            W, b = self._unpack(w)
            return x @ W + b
        W1, b1, W2, b2 = self._unpack(w)
        return np.tanh(x @ W1 + b1) @ W2 + b2

    def loss(self, w: ParamVector, x: np.ndarray, y: np.ndarray) -> float:
        return _cross_entropy(self.logits(w, x), y)

    def gradient(self, w: ParamVector, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Mean cross-entropy gradient over the batch."""
        n = x.shape[0]
        if self.kind is TaskKind.LOGISTIC:
            W, b = self._unpack(w)
            g = _softmax(x @ W + b)
            g[np.arange(n), y] -= 1.0
            g /= n
            return np.concatenate([(x.T @ g).ravel(), g.sum(axis=0)])
        W1, b1, W2, b2 = self._unpack(w)
        hid = np.tanh(x @ W1 + b1)
        g = _softmax(hid @ W2 + b2)
        g[np.arange(n), y] -= 1.0
        g /= n
        dz = (g @ W2.T) * (1.0 - hid * hid)
        return np.concatenate([(x.T @ dz).ravel(), dz.sum(axis=0), (hid.T @ g).ravel(), g.sum(axis=0)])

    def init_params(self, seed: int) -> np.ndarray:
        if self.kind is TaskKind.LOGISTIC:
            return np.zeros(self.d)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_INIT]))
        f, h, m = self.features, self.hidden, self.num_classes
        lim1 = np.sqrt(6.0 / (f + h))
        lim2 = np.sqrt(6.0 / (h + m))
        return np.concatenate([
            rng.uniform(-lim1, lim1, size=f * h), np.zeros(h),
            rng.uniform(-lim2, lim2, size=h * m), np.zeros(m),
        ])


def make_classification_task(
    kind: TaskKind | str,
    num_samples: int = 2000,
    num_classes: int = 10,
    seed: int = 0,
    features: int = 20,
    test_samples: int = 400,
    hidden: int = 32,
    center_scale: float = 3.0,
) -> ClassificationTask:
    kind = TaskKind.parse(kind)
    if kind is TaskKind.QUADRATIC:
        raise InvalidArgumentError("quadratic is not a classification task")
    if num_classes < 2:
        raise InvalidArgumentError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_TASK]))
    x_train, y_train, centers = make_blobs(num_samples, num_classes, features, rng, center_scale)
    x_test, y_test, _ = make_blobs(test_samples, num_classes, features, rng, centers=centers)
    dataset = Dataset(x_train, y_train, x_test, y_test, num_classes)
    return ClassificationTask(kind=kind, dataset=dataset, features=features, hidden=hidden)


Task = Union[QuadraticTask, ClassificationTask]


def build_task(task_cfg: TaskConfig, partition_cfg: PartitionConfig, n_clients: int, seed: int) -> tuple[Task, list[ClientData]]:
    """Instantiate the configured task and each client's local data."""
    kind = TaskKind.parse(task_cfg.kind)
    if kind is TaskKind.QUADRATIC:
        task = make_quadratic_task(task_cfg.d, task_cfg.mu, task_cfg.L, seed, n_clients, task_cfg.heterogeneity)
        share = max(1, task_cfg.train_samples // n_clients)
        return task, [ClientData(client_id=i, size=share) for i in range(n_clients)]

    task = make_classification_task(
        kind, task_cfg.train_samples, task_cfg.num_classes, seed,
        task_cfg.features, task_cfg.test_samples, task_cfg.hidden, task_cfg.center_scale,
    )
    split = partition_data(task.dataset.y_train, n_clients, partition_cfg.mode, partition_cfg.alpha, seed)
    clients = [
        ClientData(client_id=i, x=task.dataset.x_train[ix], y=task.dataset.y_train[ix], size=len(ix))
        for i, ix in enumerate(split.indices)
    ]
    return task, clients


# -------- Training --------
def learning_rate(optimizer: OptimizerConfig, round_idx: int, mu: float = 1.0) -> float:
    """Constant lr, or the decaying 8 / (mu * (t + a)) schedule."""
    if optimizer.schedule == "inverse_time":
        return 8.0 / (mu * (round_idx + optimizer.schedule_offset))
    return optimizer.lr


@dataclass
class LocalTrainResult:
    params: np.ndarray
    steps: int = 0
    warning: Optional[str] = None


def local_train(
    task: Task,
    start: ParamVector,
    client: ClientData,
    epochs: int,
    optimizer: OptimizerConfig,
    rng: np.random.Generator,
    round_idx: int = 1,
) -> LocalTrainResult:
    """
    Train from `start` on one client's data.

    Quadratic clients take one full-gradient step per epoch; classification
    clients run shuffled minibatches through Adam (fresh moments every call)
    or SGD.
    """
    w = np.array(start, dtype=np.float64, copy=True)
    if epochs <= 0:
        return LocalTrainResult(params=w)

    if isinstance(task, QuadraticTask):
        lr = learning_rate(optimizer, round_idx, task.mu)
        for _ in range(epochs):
            w = w - lr * task.client_gradient(w, client.client_id)
        return LocalTrainResult(params=w, steps=epochs)

    if client.x is None or client.x.shape[0] == 0:
        logger.warning("client {} has no training data, returning the start model", client.client_id)
        return LocalTrainResult(params=w, warning="empty client data")

    lr = learning_rate(optimizer, round_idx)
    n = client.x.shape[0]
    m1 = np.zeros_like(w)
    m2 = np.zeros_like(w)
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, optimizer.batch_size):
            batch = order[lo:lo + optimizer.batch_size]
            g = task.gradient(w, client.x[batch], client.y[batch])
            steps += 1
            if optimizer.name == "adam":
                m1 = optimizer.beta1 * m1 + (1 - optimizer.beta1) * g
                m2 = optimizer.beta2 * m2 + (1 - optimizer.beta2) * g * g
                m1_hat = m1 / (1 - optimizer.beta1 ** steps)
                m2_hat = m2 / (1 - optimizer.beta2 ** steps)
                w = w - lr * m1_hat / (np.sqrt(m2_hat) + optimizer.eps)
            else:
                w = w - lr * g
    return LocalTrainResult(params=w, steps=steps)


# -------- Evaluation --------
def evaluate(model: ParamVector, task: Task) -> dict[str, Any]:
    """
    Full-pass metrics of the global model: loss and accuracy (classification,
    plus top-5 when there are at least 5 classes) or loss and squared
    distance to the optimum (quadratic).
    """
    model = as_param_vector(model, task.d, name="model")
    if isinstance(task, QuadraticTask):
        diff = model - task.optimum
        return {"loss": task.loss(model), "accuracy": None, "top5_accuracy": None, "dist_to_opt": float(np.dot(diff, diff))}

    ds = task.dataset
    logits = task.logits(model, ds.x_test)
    out = {
        "loss": _cross_entropy(logits, ds.y_test),
        "accuracy": float(np.mean(np.argmax(logits, axis=1) == ds.y_test)),
        "top5_accuracy": None,
        "dist_to_opt": None,
    }
    if task.num_classes >= 5:
        top5 = np.argsort(-logits, axis=1, kind="stable")[:, :5]
        out["top5_accuracy"] = float(np.mean((top5 == ds.y_test[:, None]).any(axis=1)))
    return out
