"""Checkpoint container: canonical bytes, CRC integrity, truncation fuzzing,
and scene/config file validation."""

import json
import struct

import numpy as np
import pytest

from pb4u import io as pio
from pb4u import network as net
from pb4u.errors import ConfigMismatch, FormatError, IoError
from pb4u.scenes import drape_sphere_preset, hang_pinned_preset

CFG = net.NetworkConfig(latent_dim=16, processor_depth=2)


def small_params(seed=0):
    return net.init_params(CFG, seed=seed, vertex_dim=14, edge_dim=7, dtype=np.float32)


def test_roundtrip_bitwise(tmp_path):
    params = small_params()
    path = tmp_path / "model.ckpt"
    pio.save_checkpoint(params, path, meta={"gamma": 0.9, "k_base": 8, "l_base": 0.05})
    loaded, meta = pio.load_checkpoint(path)
    src = params.named_tensors()
    dst = loaded.named_tensors()
    assert set(src) == set(dst)
    for name in src:
        assert np.array_equal(src[name].data, dst[name].data), name
    assert meta["k_base"] == 8.0
    assert meta["gamma"] == 0.9
    assert meta["l_base"] == 0.05  # meta scalars round-trip at full precision
    assert len(loaded.blocks) == 2


def test_canonical_serialization(tmp_path):
    params = small_params(seed=5)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    pio.save_checkpoint(params, a, meta={"gamma": 0.9, "k_base": 8, "l_base": 0.05})
    pio.save_checkpoint(params, b, meta={"gamma": 0.9, "k_base": 8, "l_base": 0.05})
    assert a.read_bytes() == b.read_bytes()


def test_single_byte_corruption_fails_crc(tmp_path):
    params = small_params()
    path = tmp_path / "model.ckpt"
    pio.save_checkpoint(params, path, meta={"gamma": 0.9, "k_base": 8, "l_base": 0.05})
    blob = bytearray(path.read_bytes())
    header_len = struct.unpack_from("<Q", blob, 12)[0]
    payload_start = 8 + 4 + 8 + header_len
    blob[payload_start + 100] ^= 0x01
    corrupted = tmp_path / "bad.ckpt"
    corrupted.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="CRC"):
        pio.load_tensors(corrupted)


def test_bad_magic_and_future_version(tmp_path):
    params = small_params()
    path = tmp_path / "model.ckpt"
    pio.save_checkpoint(params, path)
    blob = bytearray(path.read_bytes())

    wrong = tmp_path / "magic.ckpt"
    wrong.write_bytes(b"NOTMAGIC" + bytes(blob[8:]))
    with pytest.raises(FormatError, match="magic"):
        pio.load_tensors(wrong)

    future = bytearray(blob)
    struct.pack_into("<I", future, 8, 99)
    future_path = tmp_path / "future.ckpt"
    future_path.write_bytes(bytes(future))
    with pytest.raises(FormatError, match="version"):
        pio.load_tensors(future_path)


def test_truncation_at_every_tensor_boundary(tmp_path):
    params = small_params()
    path = tmp_path / "model.ckpt"
    pio.save_checkpoint(params, path, meta={"gamma": 0.9, "k_base": 8, "l_base": 0.05})
    blob = path.read_bytes()
    header_len = struct.unpack_from("<Q", blob, 12)[0]
    payload_start = 8 + 4 + 8 + header_len
    header = json.loads(blob[payload_start - header_len:payload_start])
    cuts = {4, 12, payload_start - 1, payload_start, len(blob) - 5}
    for entry in header.values():
        cuts.add(payload_start + entry["byte_offset"])
        cuts.add(payload_start + entry["byte_offset"] + 2)
    for cut in sorted(cuts):
        truncated = tmp_path / "cut.ckpt"
        truncated.write_bytes(blob[:cut])
        with pytest.raises((IoError, FormatError)):
            pio.load_tensors(truncated)


def test_truncated_payload_reports_byte_counts(tmp_path):
    params = small_params()
    path = tmp_path / "model.ckpt"
    pio.save_checkpoint(params, path)
    blob = path.read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(blob[: len(blob) - 600])
    with pytest.raises((IoError, FormatError), match=r"\d+"):
        pio.load_tensors(cut)


def test_config_mismatch_on_wrong_feature_width(tmp_path):
    params = net.init_params(CFG, seed=0, vertex_dim=9, edge_dim=7, dtype=np.float32)
    path = tmp_path / "model.ckpt"
    pio.save_checkpoint(params, path)
    with pytest.raises(ConfigMismatch):
        pio.load_checkpoint(path, expect_vertex_dim=14, expect_edge_dim=7)


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(IoError):
        pio.load_tensors(tmp_path / "absent.ckpt")


def test_overlapping_tensors_rejected(tmp_path):
    header = {
        "a": {"dtype": "f32", "shape": [4], "byte_offset": 0},
        "b": {"dtype": "f32", "shape": [4], "byte_offset": 8},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"\x00" * 24
    blob = (
        pio.MAGIC + struct.pack("<I", 1) + struct.pack("<Q", len(header_bytes))
        + header_bytes + payload + struct.pack("<I", __import__("zlib").crc32(payload))
    )
    path = tmp_path / "overlap.ckpt"
    path.write_bytes(blob)
    with pytest.raises(FormatError, match="overlap"):
        pio.load_tensors(path)


def test_scene_roundtrip_and_validation(tmp_path):
    doc = drape_sphere_preset(8, frames=12)
    path = tmp_path / "scene.json"
    pio.save_scene(doc, path)
    scene = pio.load_scene(path)
    assert scene.garment.vertex_count == 64
    assert scene.frames == 12
    assert scene.pinned.size == 0

    doc_bad = dict(doc)
    doc_bad["mystery"] = 1
    with pytest.raises(FormatError, match="unknown scene fields"):
        pio.scene_from_dict(doc_bad)

    doc_pen = json.loads(json.dumps(doc))
    doc_pen["body"]["keyframes"][0] = [0.0, 0.0, 0.0, 0.0]  # sphere at the cloth plane
    with pytest.raises(FormatError, match="inside the body"):
        pio.scene_from_dict(doc_pen)


def test_hang_preset_loads_with_pins(tmp_path):
    doc = hang_pinned_preset(6, frames=10)
    path = tmp_path / "hang.json"
    pio.save_scene(doc, path)
    scene = pio.load_scene(path)
    assert scene.pinned.size == 6
    top_y = scene.initial_positions[:, 1].max()
    assert np.allclose(scene.initial_positions[scene.pinned, 1], top_y)


def test_scene_obj_garment(tmp_path):
    from pb4u.mesh import make_grid_cloth, write_obj, DEFAULT_MATERIAL

    grid = make_grid_cloth(4, 1.0, DEFAULT_MATERIAL)
    write_obj(tmp_path / "cloth.obj", grid.rest_positions, grid.triangles)
    doc = drape_sphere_preset(4, frames=8)
    doc["garment"] = {"kind": "obj", "path": "cloth.obj", "origin": [0.0, 0.0, 0.0], "pinned": []}
    path = tmp_path / "scene.json"
    pio.save_scene(doc, path)
    scene = pio.load_scene(path)
    assert scene.garment.vertex_count == 16


def test_train_config_validation(tmp_path):
    good = {"iterations": 5, "scenes": ["s.json"], "weights": {"stretch": 2.0}}
    path = tmp_path / "train.json"
    path.write_text(json.dumps(good))
    cfg = pio.load_train_config(path)
    assert cfg.iterations == 5
    assert cfg.weights.stretch == 2.0
    assert cfg.weights.bending == 1.0
    assert cfg.scenes == [str(tmp_path / "s.json")]

    bad = dict(good)
    bad["optimizer"] = "sgd"
    path.write_text(json.dumps(bad))
    with pytest.raises(FormatError, match="unknown"):
        pio.load_train_config(path)

    path.write_text(json.dumps({"iterations": 5, "scenes": []}))
    with pytest.raises(FormatError, match="scene"):
        pio.load_train_config(path)
