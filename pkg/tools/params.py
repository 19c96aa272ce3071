# tools/params.py
# Flat parameter vectors and the pack layout every other module shares.

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING, Sequence

import numpy as np

from tools.errors import InvalidArgumentError

if TYPE_CHECKING:
    from tools.sparsify import SparseUpdate

# A ParamVector is a 1-D float64 numpy array of length d.
ParamVector = np.ndarray

DEFAULT_PACK_SIZE = 8


def round_half_up(x: float) -> int:
    """Round to the nearest integer, halves going up (2.5 -> 3)."""
    return int(math.floor(x + 0.5))


def as_param_vector(values: Sequence[float] | np.ndarray, d: int | None = None, name: str = "vector") -> ParamVector:
    """
    Coerce `values` into a finite float64 vector, optionally of length d.
    """
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise InvalidArgumentError(f"{name} must be 1-D, got shape {vec.shape}")
    if d is not None and vec.shape[0] != d:
        raise InvalidArgumentError(f"{name} has length {vec.shape[0]}, expected {d}")
    if not np.all(np.isfinite(vec)):
        raise InvalidArgumentError(f"{name} contains NaN or Inf")
    return vec


@dataclass(frozen=True)
class PackPartition:
    """
    Contiguous split of [0, d) into packs of `pack_size` coordinates.

    Pack p covers [p*s, min((p+1)*s, d)); only the last pack may be short.
    """

    d: int
    pack_size: int

    @property
    def pack_count(self) -> int:
        return -(-self.d // self.pack_size)

    def bounds(self, p: int) -> tuple[int, int]:
        if not 0 <= p < self.pack_count:
            raise InvalidArgumentError(f"pack {p} outside [0, {self.pack_count})")
        start = p * self.pack_size
        return start, min(start + self.pack_size, self.d)

    def ranges(self) -> list[tuple[int, int]]:
        return [self.bounds(p) for p in range(self.pack_count)]

    @cached_property
    def starts(self) -> np.ndarray:
        return np.arange(0, self.d, self.pack_size, dtype=np.int64)

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.diff(np.append(self.starts, self.d))

    @cached_property
    def pack_of(self) -> np.ndarray:
        """Pack index of every coordinate."""
        return np.arange(self.d, dtype=np.int64) // self.pack_size

    def expand(self, pack_bits: np.ndarray) -> np.ndarray:
        """Per-pack booleans (..., P) -> per-coordinate booleans (..., d)."""
        pack_bits = np.asarray(pack_bits, dtype=bool)
        if pack_bits.shape[-1] != self.pack_count:
            raise InvalidArgumentError(
                f"expected {self.pack_count} pack bits, got {pack_bits.shape[-1]}"
            )
        return np.take(pack_bits, self.pack_of, axis=-1)


def partition_packs(d: int, pack_size: int) -> PackPartition:
    if d < 1:
        raise InvalidArgumentError(f"dimension must be positive, got d={d}")
    if pack_size < 1 or pack_size > d:
        raise InvalidArgumentError(f"pack_size must be in [1, {d}], got {pack_size}")
    return PackPartition(d=int(d), pack_size=int(pack_size))


def densify(update: SparseUpdate, partition: PackPartition, fill: ParamVector) -> ParamVector:
    """
    Expand a sparse submission to a full vector.

    Selected packs take the update's values, every other coordinate keeps
    `fill` (the previous global model), so the implied delta is 0 there.
    """
    fill = as_param_vector(fill, partition.d, name="fill")
    if update.mask.pack_count != partition.pack_count:
        raise InvalidArgumentError(
            f"mask has {update.mask.pack_count} packs, partition has {partition.pack_count}"
        )
    selected = partition.expand(update.mask.bits)
    if update.values.shape[0] != int(selected.sum()):
        raise InvalidArgumentError(
            f"update carries {update.values.shape[0]} values for {int(selected.sum())} selected coordinates"
        )
    dense = fill.copy()
    dense[selected] = update.values
    return dense
