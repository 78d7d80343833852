"""Model identifiers and the forward-stepwise transition kernel.

A model over ``p`` candidate predictors is a subset of ``{0, ..., p-1}``
stored as a packed integer bitmask (bit ``j`` set means predictor ``j`` is
in the model).  Predictor indices are 0-based throughout the Python API;
file outputs label predictors ``1..p``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import CapacityError, DomainError

ENUMERATION_LIMIT = 20


@dataclass(frozen=True, order=False)
class ModelVector:
    """An immutable subset of the ``p`` predictors.

    Parameters
    ----------
    p : int
        Number of candidate predictors.
    mask : int
        Bitmask of included predictors; bit ``j`` is predictor ``j``.
    """

    p: int
    mask: int = 0

    def __post_init__(self):
        if self.p < 0:
            raise DomainError("p must be nonnegative")
        if self.mask < 0 or self.mask >> self.p:
            raise DomainError(f"mask {self.mask:#x} has bits beyond p={self.p}")

    @classmethod
    def null(cls, p: int) -> "ModelVector":
        return cls(p, 0)

    @classmethod
    def full(cls, p: int) -> "ModelVector":
        return cls(p, (1 << p) - 1)

    @classmethod
    def from_indices(cls, p: int, indices) -> "ModelVector":
        mask = 0
        for j in indices:
            j = int(j)
            if not 0 <= j < p:
                raise DomainError(f"predictor index {j} out of range for p={p}")
            mask |= 1 << j
        return cls(p, mask)

    @classmethod
    def from_bits(cls, bits: Sequence[int]) -> "ModelVector":
        return cls.from_indices(len(bits), [j for j, b in enumerate(bits) if b])

    @classmethod
    def from_string(cls, text: str) -> "ModelVector":
        if any(ch not in "01" for ch in text):
            raise DomainError(f"model string {text!r} must contain only '0' and '1'")
        return cls.from_bits([ch == "1" for ch in text])

    @classmethod
    def from_array(cls, arr) -> "ModelVector":
        arr = np.asarray(arr, dtype=bool)
        return cls(arr.size, mask_from_bool(arr))

    @property
    def size(self) -> int:
        """Number of included predictors."""
        return bin(self.mask).count("1")

    @property
    def bits(self) -> tuple:
        return tuple((self.mask >> j) & 1 for j in range(self.p))

    def indices(self) -> list:
        return [j for j in range(self.p) if (self.mask >> j) & 1]

    def excluded(self) -> list:
        return [j for j in range(self.p) if not (self.mask >> j) & 1]

    def __contains__(self, j: int) -> bool:
        return bool((self.mask >> j) & 1)

    def is_full(self) -> bool:
        return self.mask == (1 << self.p) - 1

    def add(self, j: int) -> "ModelVector":
        return add_variable(self, j)

    def remove(self, j: int) -> "ModelVector":
        self._check_index(j)
        return ModelVector(self.p, self.mask & ~(1 << j))

    def is_submodel_of(self, other: "ModelVector") -> bool:
        return self.p == other.p and (self.mask & ~other.mask) == 0

    def to_array(self) -> np.ndarray:
        return bool_from_mask(self.mask, self.p)

    def to_string(self) -> str:
        return "".join("1" if (self.mask >> j) & 1 else "0" for j in range(self.p))

    def sort_key(self) -> tuple:
        """Key for the canonical (size, lexicographic index set) order."""
        return (self.size, tuple(self.indices()))

    def _check_index(self, j):
        if not 0 <= j < self.p:
            raise DomainError(f"predictor index {j} out of range for p={self.p}")

    def __str__(self):
        return self.to_string()

    def __repr__(self):
        return f"ModelVector('{self.to_string()}')"


@dataclass(frozen=True)
class PathStep:
    """One pair of decision variables of the stepwise procedure.

    ``selected`` is ``None`` whenever ``stop`` is true.
    """

    stop: bool
    selected: Optional[int] = None

    def __post_init__(self):
        if self.stop and self.selected is not None:
            raise DomainError("a stopped step cannot select a predictor")
        if not self.stop and self.selected is None:
            raise DomainError("a continuing step must select a predictor")


def mask_from_bool(arr) -> int:
    arr = np.asarray(arr, dtype=bool)
    packed = np.packbits(arr, bitorder="little")
    return int.from_bytes(packed.tobytes(), "little")


def bool_from_mask(mask: int, p: int) -> np.ndarray:
    if p == 0:
        return np.zeros(0, dtype=bool)
    raw = np.frombuffer(mask.to_bytes((p + 7) // 8, "little"), dtype=np.uint8)
    return np.unpackbits(raw, bitorder="little")[:p].astype(bool)


def masks_to_bool(masks, p: int) -> np.ndarray:
    """Expand integer masks (``p <= 62``) into a boolean matrix."""
    masks = np.asarray(masks, dtype=np.int64)
    return ((masks[:, None] >> np.arange(p, dtype=np.int64)) & 1).astype(bool)


def popcount(masks) -> np.ndarray:
    masks = np.asarray(masks, dtype=np.int64)
    count = np.zeros(masks.shape, dtype=np.int64)
    m = masks.copy()
    while np.any(m):
        count += m & 1
        m >>= 1
    return count


def add_variable(model: ModelVector, j: int) -> ModelVector:
    """Return the model with predictor ``j`` included (unchanged if present)."""
    model._check_index(j)
    return ModelVector(model.p, model.mask | (1 << j))


def _stop_prob(prior, model: ModelVector) -> float:
    if model.is_full():
        return 1.0
    return float(prior.rho(model))


def transition_probability(prior, prev: ModelVector, nxt: ModelVector, t: int) -> float:
    """One-step kernel probability of moving from ``prev`` to ``nxt`` at step ``t``.

    ``t`` runs from 1 to ``p``.  A model smaller than ``t - 1`` means the
    procedure has already stopped, so it stays put with probability one.
    """
    p = prev.p
    if nxt.p != p:
        raise DomainError("models have different dimensions")
    if not 1 <= t <= p:
        raise DomainError(f"step index {t} outside 1..{p}")
    size = prev.size
    if size > t - 1:
        raise DomainError(f"model of size {size} is not reachable after {t - 1} steps")
    if size < t - 1:
        return 1.0 if nxt == prev else 0.0
    rho = _stop_prob(prior, prev)
    if nxt == prev:
        return rho
    added = nxt.mask & ~prev.mask
    if (prev.mask & ~nxt.mask) or added == 0 or added & (added - 1):
        return 0.0
    j = added.bit_length() - 1
    lam = prior.lam(prev)
    return (1.0 - rho) * float(lam[j])


def path_probability(prior, path: Sequence[ModelVector]) -> float:
    """Probability of an entire sequence of tentative models ``γ(0), ..., γ(p)``."""
    if not path:
        raise DomainError("empty path")
    p = path[0].p
    if len(path) != p + 1:
        raise DomainError(f"path must have p+1={p + 1} models, got {len(path)}")
    if path[0].mask != 0:
        raise DomainError("path must start at the null model")
    for a, b in zip(path, path[1:]):
        if b.p != p:
            raise DomainError("models have different dimensions")
        if a.mask & ~b.mask:
            raise DomainError(f"path removes a predictor between {a} and {b}")
        if b.size - a.size > 1:
            raise DomainError(f"path adds more than one predictor between {a} and {b}")
    prob = 1.0
    for t in range(1, p + 1):
        prev, nxt = path[t - 1], path[t]
        if prev.size > t - 1:
            return 0.0
        prob *= transition_probability(prior, prev, nxt, t)
        if prob == 0.0:
            return 0.0
    return prob


def check_enumerable(p: int, limit: int = ENUMERATION_LIMIT) -> None:
    if p > limit:
        raise CapacityError(f"p={p} exceeds the enumeration limit of {limit}")


def enumerate_models(p: int, limit: int = ENUMERATION_LIMIT) -> Iterator[ModelVector]:
    """Yield all ``2**p`` models ordered by size, then by index set."""
    check_enumerable(p, limit)
    for s in range(p + 1):
        for combo in itertools.combinations(range(p), s):
            mask = 0
            for j in combo:
                mask |= 1 << j
            yield ModelVector(p, mask)


def canonical_masks(p: int, limit: int = ENUMERATION_LIMIT) -> np.ndarray:
    """Integer masks of all models in canonical enumeration order."""
    check_enumerable(p, limit)
    out = np.empty(1 << p, dtype=np.int64)
    pos = 0
    weights = 1 << np.arange(p, dtype=np.int64)
    for s in range(p + 1):
        combos = combinations_array(p, s)
        out[pos:pos + len(combos)] = weights[combos].sum(axis=1) if s else 0
        pos += len(combos)
    return out


def combinations_array(n: int, r: int) -> np.ndarray:
    """All ``r``-subsets of ``range(n)`` as rows, in lexicographic order."""
    count = math.comb(n, r)
    if r == 0:
        return np.zeros((1, 0), dtype=np.int64)
    flat = np.fromiter(itertools.chain.from_iterable(itertools.combinations(range(n), r)),
                       dtype=np.int64, count=count * r)
    return flat.reshape(count, r)


def masks_by_size(p: int) -> list:
    """Integer masks grouped by model size (index ``s`` holds all size-``s`` masks)."""
    weights = 1 << np.arange(p, dtype=np.int64)
    levels = []
    for s in range(p + 1):
        combos = combinations_array(p, s)
        levels.append(weights[combos].sum(axis=1) if s else np.zeros(1, dtype=np.int64))
    return levels
