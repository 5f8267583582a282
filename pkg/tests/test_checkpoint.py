import numpy as np
import pytest

from helpers import small_model
from hybridmap.checkpoint import MAGIC, load_checkpoint, read_checkpoint, save_checkpoint
from hybridmap.errors import LoadError
from hybridmap.network import HybridModel, ModelConfig


@pytest.fixture(params=["float64", "float32"])
def model(request):
    m = small_model(seed=5, dtype=request.param, leaves=((0, 0, 0), (1, 0, 0), (1, 1, 0)))
    m.octree.vertex_initialized[:3] = True
    return m


def test_roundtrip_bit_exact(tmp_path, model):
    path = tmp_path / "c.bin"
    save_checkpoint(path, model, {"note": "x"})
    back = load_checkpoint(path)
    assert back.config == model.config
    for name, p in model.parameters().items():
        q = back.parameters()[name]
        assert q.dtype == p.dtype
        np.testing.assert_array_equal(q, p)
    for key, value in model.octree.state().items():
        np.testing.assert_array_equal(back.octree.state()[key], value)
    pts = np.random.default_rng(0).uniform([0, 0, 0], [0.2, 0.2, 0.1], size=(50, 3))
    pts = pts[model.octree.contains(pts)]
    np.testing.assert_array_equal(back.sdf(pts), model.sdf(pts))
    np.testing.assert_array_equal(back.color(pts), model.color(pts))
    header, _ = read_checkpoint(path)
    assert header["extra"] == {"note": "x"}


def test_second_save_is_identical(tmp_path, model):
    save_checkpoint(tmp_path / "a.bin", model)
    save_checkpoint(tmp_path / "b.bin", load_checkpoint(tmp_path / "a.bin"))
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_empty_model(tmp_path):
    m = HybridModel(ModelConfig(log2_table_size=8))
    save_checkpoint(tmp_path / "e.bin", m)
    assert load_checkpoint(tmp_path / "e.bin").octree.num_leaves == 0


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing", "header", "version", "missing"])
def test_corruption_detected(tmp_path, damage):
    path = tmp_path / "c.bin"
    save_checkpoint(path, small_model())
    data = path.read_bytes()
    if damage == "magic":
        data = b"X" + data[1:]
    elif damage == "truncate":
        data = data[:-10]
    elif damage == "trailing":
        data = data + b"\0"
    elif damage == "header":
        data = data[: len(MAGIC) + 8] + b"}" + data[len(MAGIC) + 9 :]
    elif damage == "version":
        data = data[: len(MAGIC)] + b"\x63" + data[len(MAGIC) + 1 :]
    if damage == "missing":
        path = tmp_path / "absent.bin"
    else:
        path.write_bytes(data)
    with pytest.raises(LoadError):
        load_checkpoint(path)
