import pytest

from fadpy.memory_scenes import MemorySceneRepo
from tests.scenes import BaseTest_SceneRepo


@pytest.fixture
def scene_repo():
    return MemorySceneRepo()


class Test_MemorySceneRepo(BaseTest_SceneRepo):

    def test_load__returns_copy(self, scene_repo):
        scene_repo.load().append(None)
        assert scene_repo.load() == []
