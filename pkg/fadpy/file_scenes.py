import json
from pathlib import Path
from typing import Any, Final, List, Optional, Sequence

import numpy as np

from fadpy.data import DataConfig, SceneObject, SceneRepo, SyntheticScene
from fadpy.errors import CheckpointError
from fadpy.utils import canonical_json, sha256_hex


INDEX_NAME: Final[str] = "index.json"
INDEX_VERSION: Final[int] = 1
BLOB_DTYPE: Final[str] = "<f4"


class FileSceneRepo(SceneRepo):
    """Directory of `scene_NNNNN.bin` blobs plus `index.json` with seeds and checksums.

    A blob holds the image followed by one (label, x1, y1, x2, y2) row per object.
    """

    def __init__(self, scenes_dir: Path) -> None:
        self._scenes_dir = scenes_dir

    def load(self) -> List[SyntheticScene]:
        index = self._read_index()
        if index is None:
            return []
        return [self._load_scene(entry) for entry in index["scenes"]]

    def save(self, scenes: Sequence[SyntheticScene], config: DataConfig) -> None:
        self._scenes_dir.mkdir(parents=True, exist_ok=True)
        for stale in self._scenes_dir.glob("scene_*.bin"):
            stale.unlink()
        entries = []
        for number, scene in enumerate(scenes):
            rows = np.array(
                [(obj.label,) + obj.box for obj in scene.objects], dtype=BLOB_DTYPE
            ).reshape(-1, 5)
            blob = scene.image.astype(BLOB_DTYPE).tobytes() + rows.tobytes()
            name = f"scene_{number:05d}.bin"
            (self._scenes_dir / name).write_bytes(blob)
            entries.append({
                "file": name,
                "seed": scene.seed,
                "shape": list(scene.image.shape),
                "objects": len(scene.objects),
                "sha256": sha256_hex(blob),
            })
        index = {"version": INDEX_VERSION, "config": config.to_dict(), "scenes": entries}
        index_path = self._scenes_dir / INDEX_NAME
        index_path.write_text(canonical_json(index), encoding="utf-8")

    def cached_config(self) -> Optional[DataConfig]:
        index = self._read_index()
        if index is None:
            return None
        try:
            return DataConfig(**index["config"])
        except (TypeError, ValueError) as err:
            raise CheckpointError(f"Scene index holds an invalid config: {err}") from err

    def seeds(self) -> List[int]:
        index = self._read_index()
        return [] if index is None else [entry["seed"] for entry in index["scenes"]]

    def _read_index(self) -> Optional[Any]:
        path = self._scenes_dir / INDEX_NAME
        if not path.exists():
            return None
        try:
            index = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise CheckpointError(f"Scene index is not valid JSON: {err}") from err
        if index.get("version") != INDEX_VERSION:
            raise CheckpointError(
                f"Unsupported scene index version {index.get('version')!r}"
            )
        return index

    def _load_scene(self, entry: Any) -> SyntheticScene:
        blob = (self._scenes_dir / entry["file"]).read_bytes()
        if sha256_hex(blob) != entry["sha256"]:
            raise CheckpointError(f"Checksum mismatch for {entry['file']}")
        shape = tuple(entry["shape"])
        pixels = int(np.prod(shape))
        data = np.frombuffer(blob, dtype=BLOB_DTYPE)
        if data.size != pixels + 5 * entry["objects"]:
            raise CheckpointError(f"{entry['file']} has an unexpected size")
        image = data[:pixels].astype(np.float32).reshape(shape)
        objects = tuple(
            SceneObject(int(row[0]), tuple(float(v) for v in row[1:]))
            for row in data[pixels:].reshape(-1, 5)
        )
        return SyntheticScene(image, objects, int(entry["seed"]))
