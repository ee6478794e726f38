import json

import numpy as np
import pytest

from fadpy.checkpoint import (
    BLOB_NAME,
    load_checkpoint,
    MANIFEST_NAME,
    restore,
    save_checkpoint,
)
from fadpy.errors import CheckpointError
from fadpy.params import ParamKind, ParamStore
from fadpy.tensor import Tensor


def make_store(seed=0):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.add("cell.conv.weight", Tensor(rng.standard_normal((4, 2, 3, 3))))
    store.add("cell.gn.bias", Tensor(rng.standard_normal(4)))
    store.add("alphas.1", Tensor(rng.standard_normal((3, 5))), ParamKind.ARCHITECTURE)
    return store


def test_save_then_load(tmp_path):
    store = make_store()
    save_checkpoint(tmp_path, store, {"seed": 3})
    checkpoint = load_checkpoint(tmp_path)
    assert checkpoint.meta == {"seed": 3}
    assert checkpoint.kinds["alphas.1"] is ParamKind.ARCHITECTURE
    for name, tensor in store.items():
        assert checkpoint.arrays[name].dtype == np.float32
        np.testing.assert_array_equal(
            checkpoint.arrays[name], tensor.data.astype(np.float32)
        )


def test_save__layout(tmp_path):
    store = make_store()
    save_checkpoint(tmp_path, store)
    manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
    assert [e["name"] for e in manifest["entries"]] == sorted(store.names())
    assert manifest["dtype"] == "<f4"
    offsets = [e["offset"] for e in manifest["entries"]]
    assert offsets == [0, 15 * 4, (15 + 72) * 4]
    assert (tmp_path / BLOB_NAME).stat().st_size == store.num_elements() * 4


def test_save__deterministic(tmp_path):
    save_checkpoint(tmp_path / "a", make_store())
    save_checkpoint(tmp_path / "b", make_store())
    for name in (MANIFEST_NAME, BLOB_NAME):
        first = (tmp_path / "a" / name).read_bytes()
        assert first == (tmp_path / "b" / name).read_bytes()


def test_restore(tmp_path):
    save_checkpoint(tmp_path, make_store(seed=1))
    store = make_store(seed=2)
    restore(store, load_checkpoint(tmp_path))
    expected = make_store(seed=1)
    for name, tensor in store.items():
        np.testing.assert_allclose(tensor.data, expected[name].data, rtol=1e-6)


def test_restore__name_mismatch(tmp_path):
    save_checkpoint(tmp_path, make_store())
    store = make_store()
    store.add("extra", Tensor(np.zeros(1)))
    with pytest.raises(CheckpointError):
        restore(store, load_checkpoint(tmp_path))


def test_restore__kind_mismatch(tmp_path):
    save_checkpoint(tmp_path, make_store())
    store = ParamStore()
    for name, tensor in make_store().items():
        store.add(name, tensor, ParamKind.WEIGHT)
    with pytest.raises(CheckpointError):
        restore(store, load_checkpoint(tmp_path))


@pytest.mark.parametrize(
    "change",
    (
        {"version": 99},
        {"dtype": "<f8"},
        {"entries": [{"name": "x"}]},
        {"entries": [{"name": "x", "shape": [1000], "offset": 0, "kind": "weight"}]},
    ),
)
def test_load__malformed_manifest(tmp_path, change):
    save_checkpoint(tmp_path, make_store())
    manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
    manifest.update(change)
    (tmp_path / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_load__invalid_json(tmp_path):
    save_checkpoint(tmp_path, make_store())
    (tmp_path / MANIFEST_NAME).write_text("{")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_load__missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent")
