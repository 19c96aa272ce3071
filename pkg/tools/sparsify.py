# tools/sparsify.py
# Client-side pack-level top-k selection and the 1-bit-per-pack mask codec.

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from tools.errors import InvalidArgumentError
from tools.params import PackPartition, ParamVector, as_param_vector, round_half_up

VALUE_WIDTH = 8  # bytes per transmitted value (float64)


@dataclass(frozen=True, eq=False)
class SparseMask:
    """One bit per pack; True means the pack is transmitted."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 1 or bits.shape[0] < 1:
            raise InvalidArgumentError(f"mask must be a non-empty 1-D bit array, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_indices(cls, indices: Iterable[int], pack_count: int) -> SparseMask:
        bits = np.zeros(pack_count, dtype=bool)
        idx = np.asarray(list(indices), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= pack_count):
            raise InvalidArgumentError(f"pack index outside [0, {pack_count})")
        bits[idx] = True
        return cls(bits)

    @classmethod
    def full(cls, pack_count: int) -> SparseMask:
        return cls(np.ones(pack_count, dtype=bool))

    @classmethod
    def empty(cls, pack_count: int) -> SparseMask:
        return cls(np.zeros(pack_count, dtype=bool))

    @property
    def pack_count(self) -> int:
        return int(self.bits.shape[0])

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def __or__(self, other: SparseMask) -> SparseMask:
        return SparseMask(self.bits | other.bits)

    def __and__(self, other: SparseMask) -> SparseMask:
        return SparseMask(self.bits & other.bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    __hash__ = None

    def __repr__(self) -> str:
        return f"SparseMask(P={self.pack_count}, packs={self.indices().tolist()})"


@dataclass(frozen=True, eq=False)
class SparseUpdate:
    """
    A client's round submission.

    `values` holds the parameters of the selected packs, concatenated in
    ascending pack order.
    """

    client_id: int
    mask: SparseMask
    values: np.ndarray
    dataset_size: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise InvalidArgumentError("update values must be 1-D")
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError(f"client {self.client_id} submitted non-finite values")
        if self.dataset_size < 1:
            raise InvalidArgumentError(f"client {self.client_id} declared dataset size {self.dataset_size}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def pack_values(self, partition: PackPartition) -> dict[int, np.ndarray]:
        """Selected pack index -> that pack's values."""
        out = {}
        offset = 0
        for p in self.mask.indices():
            start, stop = partition.bounds(int(p))
            out[int(p)] = self.values[offset:offset + stop - start]
            offset += stop - start
        return out

    def payload_bytes(self, partition: PackPartition) -> int:
        return payload_size(partition.pack_count, self.mask.popcount, partition.pack_size)


def payload_size(pack_count: int, k: int, pack_size: int, value_width: int = VALUE_WIDTH) -> int:
    """Uplink bytes of one submission: the mask plus k padded packs."""
    return -(-pack_count // 8) + k * pack_size * value_width


def pack_scores(delta: ParamVector, partition: PackPartition) -> np.ndarray:
    """Euclidean norm of `delta` restricted to each pack."""
    delta = as_param_vector(delta, partition.d, name="delta")
    return np.sqrt(np.add.reduceat(delta * delta, partition.starts))


def topk_count(pack_count: int, ratio: float) -> int:
    if not 0.0 < ratio <= 1.0:
        raise InvalidArgumentError(f"top-k ratio must be in (0, 1], got {ratio}")
    return min(pack_count, max(1, round_half_up(ratio * pack_count)))


def topk_mask(scores: Sequence[float] | np.ndarray, ratio: float) -> SparseMask:
    """
    Select the k = max(1, round(ratio*P)) highest-scoring packs.

    Ties go to the lower pack index (stable sort on the negated scores).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] < 1:
        raise InvalidArgumentError("need at least one pack score")
    k = topk_count(scores.shape[0], ratio)
    chosen = np.argsort(-scores, kind="stable")[:k]
    return SparseMask.from_indices(chosen, scores.shape[0])


def gather(vector: ParamVector, mask: SparseMask, partition: PackPartition) -> np.ndarray:
    """Values of `vector` on the packs selected by `mask`, in pack order."""
    return np.asarray(vector)[partition.expand(mask.bits)]


def sparsify_update(
    local_model: ParamVector,
    prev_global: ParamVector,
    partition: PackPartition,
    ratio: float,
    client_id: int,
    dataset_size: int,
) -> SparseUpdate:
    """
    Pick packs by the norm of the local delta and ship the local parameters
    (not the deltas) of those packs.
    """
    local_model = as_param_vector(local_model, partition.d, name="local model")
    prev_global = as_param_vector(prev_global, partition.d, name="previous global")
    mask = topk_mask(pack_scores(local_model - prev_global, partition), ratio)
    return SparseUpdate(
        client_id=client_id,
        mask=mask,
        values=gather(local_model, mask, partition),
        dataset_size=dataset_size,
    )


def encode_mask(mask: SparseMask) -> bytes:
    """
    Little-endian bit packing: pack p sits at bit p % 8 of byte p // 8,
    pad bits are zero.
    """
    return np.packbits(mask.bits.astype(np.uint8), bitorder="little").tobytes()


def decode_mask(data: bytes, pack_count: int) -> SparseMask:
    if pack_count < 1:
        raise InvalidArgumentError(f"pack_count must be positive, got {pack_count}")
    expected = -(-pack_count // 8)
    if len(data) < expected:
        raise InvalidArgumentError(f"mask needs {expected} bytes for {pack_count} packs, got {len(data)}")
    if len(data) > expected:
        raise InvalidArgumentError(f"mask for {pack_count} packs has {len(data) - expected} trailing bytes")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if bits[pack_count:].any():
        raise InvalidArgumentError("nonzero pad bits in mask")
    return SparseMask(bits[:pack_count].astype(bool))


def encode_values(update: SparseUpdate, partition: PackPartition) -> bytes:
    """
    Selected pack values as little-endian float64, ascending pack order,
    each pack zero-padded to `pack_size` values.
    """
    block = np.zeros((update.mask.popcount, partition.pack_size), dtype="<f8")
    for row, values in enumerate(update.pack_values(partition).values()):
        block[row, :values.shape[0]] = values
    return block.tobytes()


def decode_values(data: bytes, mask: SparseMask, partition: PackPartition) -> np.ndarray:
    k = mask.popcount
    if len(data) != k * partition.pack_size * VALUE_WIDTH:
        raise InvalidArgumentError(
            f"value block for {k} packs must be {k * partition.pack_size * VALUE_WIDTH} bytes, got {len(data)}"
        )
    block = np.frombuffer(data, dtype="<f8").reshape(k, partition.pack_size)
    sizes = partition.sizes[mask.indices()]
    return np.concatenate([block[row, :size] for row, size in enumerate(sizes)]).astype(np.float64)
