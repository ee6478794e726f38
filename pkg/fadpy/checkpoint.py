"""Checkpoints: `manifest.json` describing a flat little-endian float32 `params.bin`."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, Final, Mapping, NamedTuple, Optional

import numpy as np

from fadpy.errors import CheckpointError
from fadpy.params import ParamKind, ParamStore
from fadpy.utils import canonical_json


logger = logging.getLogger(__name__)


# Constants
CHECKPOINT_VERSION: Final[int] = 1
BLOB_DTYPE: Final[str] = "<f4"
MANIFEST_NAME: Final[str] = "manifest.json"
BLOB_NAME: Final[str] = "params.bin"


class Checkpoint(NamedTuple):
    arrays: Dict[str, np.ndarray]
    kinds: Dict[str, ParamKind]
    meta: Dict[str, Any]


def save_checkpoint(
        directory: Path,
        store: ParamStore,
        meta: Optional[Mapping[str, Any]] = None,
) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, tensor in store.items():
        blob = tensor.data.astype(BLOB_DTYPE).tobytes()
        entries.append({
            "name": name,
            "shape": list(tensor.shape),
            "offset": offset,
            "kind": store.kind(name).value,
        })
        chunks.append(blob)
        offset += len(blob)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "dtype": BLOB_DTYPE,
        "entries": entries,
        "meta": dict(meta or {}),
    }
    (directory / BLOB_NAME).write_bytes(b"".join(chunks))
    (directory / MANIFEST_NAME).write_text(canonical_json(manifest), encoding="utf-8")
    logger.debug("saved %d parameters (%d bytes) to %s", len(entries), offset, directory)


def load_checkpoint(directory: Path) -> Checkpoint:
    try:
        manifest = json.loads((directory / MANIFEST_NAME).read_text(encoding="utf-8"))
        blob = (directory / BLOB_NAME).read_bytes()
    except json.JSONDecodeError as err:
        raise CheckpointError(f"Manifest is not valid JSON: {err}") from err

    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint version: {manifest.get('version')!r}"
        )
    if manifest.get("dtype") != BLOB_DTYPE:
        raise CheckpointError(f"Unsupported checkpoint dtype: {manifest.get('dtype')!r}")

    arrays: Dict[str, np.ndarray] = {}
    kinds: Dict[str, ParamKind] = {}
    itemsize = np.dtype(BLOB_DTYPE).itemsize
    for entry in manifest.get("entries", []):
        try:
            name = entry["name"]
            shape = tuple(entry["shape"])
            offset = entry["offset"]
            kind = ParamKind(entry["kind"])
        except (KeyError, TypeError, ValueError) as err:
            raise CheckpointError(f"Malformed manifest entry {entry!r}") from err
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * itemsize
        if offset < 0 or end > len(blob):
            raise CheckpointError(f"Entry '{name}' lies outside the parameter blob")
        arrays[name] = np.frombuffer(blob, BLOB_DTYPE, count, offset).astype(np.float32)
        arrays[name] = arrays[name].reshape(shape)
        kinds[name] = kind
    return Checkpoint(arrays, kinds, manifest.get("meta", {}))


def restore(store: ParamStore, checkpoint: Checkpoint) -> None:
    """Load checkpoint values into an existing store with the same names."""
    missing = set(store.names()) ^ set(checkpoint.arrays)
    if missing:
        raise CheckpointError(
            "Checkpoint and model disagree on parameters: "
            + ", ".join(sorted(missing)[:5])
        )
    for name in store.names():
        if checkpoint.kinds[name] is not store.kind(name):
            raise CheckpointError(f"Parameter '{name}' changed kind")
    store.load(checkpoint.arrays)
