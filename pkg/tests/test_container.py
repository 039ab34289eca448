import json

import numpy as np

from mdlkit.container import load_container, manifest_path, save_container


def test_round_trip_and_manifest(tmp_path):
    arrays = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.array([1.5], dtype=np.float64)}
    save_container(tmp_path / "w.bin", arrays)
    back, manifest = load_container(tmp_path / "w.bin")
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].tobytes() == v.tobytes()
    doc = json.loads(manifest_path(tmp_path / "w.bin").read_text())
    assert [t["name"] for t in doc["tensors"]] == ["a", "b"]
    assert doc["tensors"][1]["shape"] == [2, 3]
    raw = (tmp_path / "w.bin").read_bytes()
    off = doc["tensors"][1]["offset"]
    assert np.frombuffer(raw[off:off + 24], dtype="<f4").tolist() == [0, 1, 2, 3, 4, 5]
    assert manifest["tensors"] == doc["tensors"]


def test_identical_payload_identical_bytes(tmp_path):
    arrays = {"x": np.random.default_rng(0).standard_normal((3, 3)).astype(np.float32)}
    save_container(tmp_path / "a.bin", arrays)
    save_container(tmp_path / "b.bin", dict(arrays))
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert manifest_path(tmp_path / "a.bin").read_text() == manifest_path(tmp_path / "b.bin").read_text()
