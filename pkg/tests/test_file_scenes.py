import json

import pytest

from fadpy.data import generate_detection_dataset
from fadpy.errors import CheckpointError
from fadpy.file_scenes import FileSceneRepo, INDEX_NAME
from tests.scenes import BaseTest_SceneRepo, CONFIG


@pytest.fixture
def scene_repo(tmp_path):
    return FileSceneRepo(tmp_path / "scenes")


class Test_FileSceneRepo(BaseTest_SceneRepo):

    def test_save__removes_stale_blobs(self, scene_repo, tmp_path):
        scene_repo.save(generate_detection_dataset(5, 3, CONFIG), CONFIG)
        scene_repo.save(generate_detection_dataset(5, 1, CONFIG), CONFIG)
        assert sorted(p.name for p in (tmp_path / "scenes").glob("*.bin")) == [
            "scene_00000.bin",
        ]

    def test_load__checksum_mismatch(self, scene_repo, tmp_path):
        scene_repo.save(generate_detection_dataset(5, 2, CONFIG), CONFIG)
        blob = tmp_path / "scenes" / "scene_00001.bin"
        data = bytearray(blob.read_bytes())
        data[0] ^= 0xFF
        blob.write_bytes(bytes(data))
        with pytest.raises(CheckpointError):
            scene_repo.load()

    @pytest.mark.parametrize(
        "change",
        (
            lambda index: index.update(version=7),
            lambda index: index["config"].update(stride=5),
            lambda index: index["config"].update(colour=True),
        ),
    )
    def test_cached_config__bad_index(self, scene_repo, tmp_path, change):
        scene_repo.save(generate_detection_dataset(5, 1, CONFIG), CONFIG)
        path = tmp_path / "scenes" / INDEX_NAME
        index = json.loads(path.read_text())
        change(index)
        path.write_text(json.dumps(index))
        with pytest.raises(CheckpointError):
            scene_repo.cached_config()

    def test_index__invalid_json(self, scene_repo, tmp_path):
        (tmp_path / "scenes").mkdir()
        (tmp_path / "scenes" / INDEX_NAME).write_text("[")
        with pytest.raises(CheckpointError):
            scene_repo.seeds()

    def test_persists_across_instances(self, scene_repo, tmp_path):
        scenes = scene_repo.get_or_generate(3, 2, CONFIG)
        assert FileSceneRepo(tmp_path / "scenes").load() == scenes
