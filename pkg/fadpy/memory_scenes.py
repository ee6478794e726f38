from typing import List, Optional, Sequence

from fadpy.data import DataConfig, SceneRepo, SyntheticScene


class MemorySceneRepo(SceneRepo):

    def __init__(self) -> None:
        self._scenes: List[SyntheticScene] = []
        self._config: Optional[DataConfig] = None

    def load(self) -> List[SyntheticScene]:
        return list(self._scenes)

    def save(self, scenes: Sequence[SyntheticScene], config: DataConfig) -> None:
        self._scenes = list(scenes)
        self._config = config

    def cached_config(self) -> Optional[DataConfig]:
        return self._config

    def seeds(self) -> List[int]:
        return [scene.seed for scene in self._scenes]
