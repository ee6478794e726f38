from __future__ import annotations

import hashlib
import json
from typing import Any, Final, Sequence, Tuple, TypeVar, overload

import numpy as np


# Type variables
T_co = TypeVar("T_co", covariant=True)


# Constants
RNG_STREAMS: Final[Tuple[str, ...]] = ("weights", "alphas", "data", "sampling", "probe")


# ============
# SequenceView
# ============


class SequenceView(Sequence[T_co]):
    """Read-only live view over a sequence owned by someone else."""

    def __init__(self, data: Sequence[T_co]) -> None:
        self._data = data

    @overload
    def __getitem__(self, index: int) -> T_co: ...

    @overload
    def __getitem__(self, index: slice) -> Sequence[T_co]: ...

    def __getitem__(self, index):
        return self._data[index]

    def __len__(self) -> int:
        return len(self._data)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, SequenceView):
            return self._data == other._data
        return self._data == other

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self._data!r})"


# ==========
# Randomness
# ==========


def derive_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for one named consumer of the run seed.

    The same (seed, stream) pair always yields the same generator state, so
    adding a consumer never shifts the numbers another consumer sees.
    """
    if stream not in RNG_STREAMS:
        raise ValueError(f"Unknown random stream '{stream}'")
    if seed < 0:
        raise ValueError(f"Seed must be non-negative ({seed})")
    sequence = np.random.SeedSequence(
        entropy=seed, spawn_key=(RNG_STREAMS.index(stream),)
    )
    return np.random.default_rng(sequence)


# ===========
# Serializing
# ===========


def canonical_json(obj: Any, *, indent: int = 2) -> str:
    """JSON text with a trailing newline; key order is the insertion order."""
    return json.dumps(obj, indent=indent, ensure_ascii=False, allow_nan=False) + "\n"


def sha256_hex(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()
