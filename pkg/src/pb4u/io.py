"""Persistence: the binary checkpoint container, scene files, and training
configuration files.

Checkpoint layout (little-endian throughout):

    magic   8 bytes  b"PB4UCKPT"
    version u32
    hlen    u64      length of the JSON header in bytes
    header  hlen     {"name": {"dtype": "f32", "shape": [...], "byte_offset": N}, ...}
    payload          raw float32 values, offsets relative to payload start
    crc     u32      CRC32 of the payload

Serialization is canonical: tensor names are sorted lexicographically, offsets
assigned densely in that order, and the header is minified sorted-key JSON, so
identical parameters always produce identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigMismatch, FormatError, InvalidArgument, IoError
from .mesh import MaterialParams, load_obj_mesh, make_grid_cloth
from .network import Mlp, ModelParams, ProcessorBlock
from .diffcore import Tensor
from .physics import LossWeights
from .scenes import BodySpec, Scene, build_scene

MAGIC = b"PB4UCKPT"
VERSION = 1


def _named_arrays(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in params.named_tensors().items()}


def save_checkpoint(params: ModelParams, path, meta: dict[str, float] | None = None) -> None:
    """Write model tensors plus scalar metadata in the canonical container
    layout. Meta scalars are float64 values stored bit-exactly as two f32
    lanes under ``meta.``, so quantities like the calibration edge length
    survive the round trip without rounding."""
    named = _named_arrays(params)
    for key, value in (meta or {}).items():
        named[f"meta.{key}"] = np.frombuffer(np.float64(value).tobytes(), dtype="<f4").copy()
    save_tensors(named, path)


def _decode_meta_scalar(lanes: np.ndarray, path, key: str) -> float:
    if lanes.shape != (2,):
        raise FormatError(f"{path}: meta tensor {key!r} must have shape (2,)")
    return float(np.frombuffer(np.asarray(lanes, dtype="<f4").tobytes(), dtype="<f8")[0])


def save_tensors(named: dict[str, np.ndarray], path) -> None:
    header: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(named):
        arr = np.asarray(named[name], dtype="<f4")  # round-to-nearest-even from wider floats
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        blob = arr.tobytes()
        header[name] = {"dtype": "f32", "shape": list(arr.shape), "byte_offset": offset}
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_tensors(path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    fixed = len(MAGIC) + 4 + 8
    if len(blob) < fixed:
        raise IoError(f"{path}: truncated before header ({len(blob)} bytes, need {fixed})")
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version > VERSION:
        raise FormatError(f"{path}: unsupported version {version} (this build reads <= {VERSION})")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC) + 4)
    header_end = fixed + header_len
    if len(blob) < header_end + 4:
        raise IoError(f"{path}: truncated header ({len(blob)} bytes, need {header_end + 4})")
    try:
        header = json.loads(blob[fixed:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be an object")

    payload = blob[header_end:-4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    crc_actual = zlib.crc32(payload) & 0xFFFFFFFF
    if crc_stored != crc_actual:
        raise FormatError(f"{path}: CRC mismatch (stored {crc_stored:#x}, payload {crc_actual:#x})")

    spans = []
    out: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "byte_offset"}:
            raise FormatError(f"{path}: malformed header entry for {name!r}")
        if entry["dtype"] != "f32":
            raise FormatError(f"{path}: unsupported dtype {entry['dtype']!r} for {name!r}")
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = 4 * int(np.prod(shape)) if shape else 4
        start = int(entry["byte_offset"])
        end = start + nbytes
        if start < 0 or end > len(payload):
            raise IoError(
                f"{path}: tensor {name!r} spans [{start}, {end}) outside payload of {len(payload)} bytes"
            )
        spans.append((start, end, name))
        out[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape).copy()
    spans.sort()
    for (s1, e1, n1), (s2, _, n2) in zip(spans, spans[1:]):
        if s2 < e1:
            raise FormatError(f"{path}: tensors {n1!r} and {n2!r} overlap")
    return out


def _collect_mlp(named: dict[str, np.ndarray], prefix: str, path) -> Mlp:
    weights, biases = [], []
    i = 0
    while f"{prefix}.w{i}" in named:
        w = named.pop(f"{prefix}.w{i}")
        key = f"{prefix}.b{i}"
        if key not in named:
            raise FormatError(f"{path}: missing bias {key!r}")
        b = named.pop(key)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise FormatError(f"{path}: inconsistent shapes for {prefix!r} layer {i}")
        weights.append(Tensor(w, track=True))
        biases.append(Tensor(b, track=True))
        i += 1
    if not weights:
        raise FormatError(f"{path}: no tensors for MLP {prefix!r}")
    return Mlp(weights, biases)


def load_checkpoint(path, expect_vertex_dim: int | None = None, expect_edge_dim: int | None = None):
    """Reconstruct (ModelParams, meta dict) from a checkpoint file.

    Model structure is inferred from tensor names and shapes; pass the
    expected feature widths to fail fast with config-mismatch on foreign
    checkpoints.
    """
    named = load_tensors(path)
    meta = {
        key[len("meta."):]: _decode_meta_scalar(named.pop(key), path, key)
        for key in sorted(named)
        if key.startswith("meta.")
    }

    block_ids = sorted({name.split(".")[1] for name in named if name.startswith("blocks.")})
    blocks = [
        ProcessorBlock(
            edge_mlp=_collect_mlp(named, f"blocks.{bid}.edge", path),
            vertex_mlp=_collect_mlp(named, f"blocks.{bid}.vertex", path),
        )
        for bid in block_ids
    ]
    params = ModelParams(
        vertex_encoder=_collect_mlp(named, "vertex_encoder", path),
        edge_encoder=_collect_mlp(named, "edge_encoder", path),
        message_fn=_collect_mlp(named, "message_fn", path),
        update_fn=_collect_mlp(named, "update_fn", path),
        blocks=blocks,
        decoder=_collect_mlp(named, "decoder", path),
        norm_gain=Tensor(_take(named, "prop_norm.gain", path), track=True),
        norm_bias=Tensor(_take(named, "prop_norm.bias", path), track=True),
    )
    if named:
        raise FormatError(f"{path}: unexpected tensors {sorted(named)}")
    if expect_vertex_dim is not None and params.vertex_encoder.in_dim != expect_vertex_dim:
        raise ConfigMismatch(
            f"{path}: vertex encoder expects {params.vertex_encoder.in_dim} features, need {expect_vertex_dim}"
        )
    if expect_edge_dim is not None and params.edge_encoder.in_dim != expect_edge_dim:
        raise ConfigMismatch(
            f"{path}: edge encoder expects {params.edge_encoder.in_dim} features, need {expect_edge_dim}"
        )
    return params, meta


def _take(named: dict[str, np.ndarray], key: str, path) -> np.ndarray:
    if key not in named:
        raise FormatError(f"{path}: missing tensor {key!r}")
    return named.pop(key)


# --- scene files -----------------------------------------------------------

_SCENE_KEYS = {
    "format", "version", "garment", "body", "material", "dt", "gravity",
    "world_edge_radius", "frames", "contact_margin",
}
_GARMENT_KEYS = {"kind", "n", "side", "path", "plane", "origin", "pinned"}
_BODY_KEYS = {"type", "radius", "keyframes", "lat", "lon"}
_MATERIAL_KEYS = {"lame_mu", "lame_lambda", "bending_coeff", "mass_density", "friction_coeff"}


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise FormatError(message)


def save_scene(scene_dict: dict, path) -> None:
    try:
        with open(path, "w", newline="\n") as fh:
            json.dump(scene_dict, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write scene {path}: {exc}") from exc


def load_scene(path) -> Scene:
    try:
        with open(path, "r") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read scene {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    return scene_from_dict(doc, base_dir=Path(path).parent)


def scene_from_dict(doc: dict, base_dir: Path | None = None) -> Scene:
    _require(isinstance(doc, dict), "scene must be a JSON object")
    unknown = set(doc) - _SCENE_KEYS
    _require(not unknown, f"unknown scene fields: {sorted(unknown)}")
    missing = _SCENE_KEYS - {"contact_margin"} - set(doc)
    _require(not missing, f"missing scene fields: {sorted(missing)}")
    _require(doc["format"] == "pb4u-scene", f"not a scene file (format={doc.get('format')!r})")
    _require(doc["version"] == 1, f"unsupported scene version {doc['version']!r}")

    mat_doc = doc["material"]
    _require(isinstance(mat_doc, dict) and set(mat_doc) == _MATERIAL_KEYS,
             "material must define exactly the five parameters")
    try:
        material = MaterialParams(**{k: float(v) for k, v in mat_doc.items()})
    except InvalidArgument as exc:
        raise FormatError(f"bad material: {exc}") from exc

    g_doc = doc["garment"]
    _require(isinstance(g_doc, dict), "garment must be an object")
    unknown = set(g_doc) - _GARMENT_KEYS
    _require(not unknown, f"unknown garment fields: {sorted(unknown)}")
    kind = g_doc.get("kind")
    if kind == "grid":
        _require("n" in g_doc and "side" in g_doc, "grid garment needs n and side")
        try:
            garment = make_grid_cloth(int(g_doc["n"]), float(g_doc["side"]), material)
        except InvalidArgument as exc:
            raise FormatError(f"bad garment grid: {exc}") from exc
    elif kind == "obj":
        _require("path" in g_doc, "obj garment needs a path")
        obj_path = Path(g_doc["path"])
        if base_dir is not None and not obj_path.is_absolute():
            obj_path = base_dir / obj_path
        garment = load_obj_mesh(obj_path, material)
    else:
        raise FormatError(f"unknown garment kind {kind!r}")

    b_doc = doc["body"]
    _require(isinstance(b_doc, dict), "body must be an object")
    unknown = set(b_doc) - _BODY_KEYS
    _require(not unknown, f"unknown body fields: {sorted(unknown)}")
    _require({"type", "radius", "keyframes"} <= set(b_doc), "body needs type, radius, keyframes")
    try:
        body = BodySpec(
            kind=b_doc["type"],
            radius=float(b_doc["radius"]),
            keyframes=np.asarray(b_doc["keyframes"], dtype=np.float64),
            lat=int(b_doc.get("lat", 12)),
            lon=int(b_doc.get("lon", 18)),
        )
        scene = build_scene(
            garment,
            plane=g_doc.get("plane", "xz"),
            origin=g_doc.get("origin", (0.0, 0.0, 0.0)),
            pinned=g_doc.get("pinned", ()),
            body=body,
            material=material,
            dt=float(doc["dt"]),
            gravity=float(doc["gravity"]),
            world_radius=float(doc["world_edge_radius"]),
            frames=int(doc["frames"]),
            contact_margin=float(doc.get("contact_margin", 0.002)),
        )
    except InvalidArgument as exc:
        raise FormatError(f"bad scene: {exc}") from exc

    gaps = np.linalg.norm(scene.initial_positions - body.center_at(0.0), axis=1)
    _require(bool(np.all(gaps >= body.radius)), "garment starts inside the body")
    return scene


# --- training configuration files ------------------------------------------

_TRAIN_KEYS = {
    "iterations", "learning_rate", "seed", "scenes", "beta1", "beta2", "epsilon",
    "gamma", "k_base", "processor_depth", "latent_dim", "weights", "grad_clip",
    "buffer_refresh", "rollout_steps",
}


def load_train_config(path):
    from .train import TrainConfig  # local import to avoid a cycle

    try:
        with open(path, "r") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read training config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    _require(isinstance(doc, dict), "training config must be a JSON object")
    unknown = set(doc) - _TRAIN_KEYS
    _require(not unknown, f"unknown training config fields: {sorted(unknown)}")
    _require("scenes" in doc and isinstance(doc["scenes"], list) and doc["scenes"],
             "training config needs a non-empty scene list")
    weights_doc = doc.get("weights", {})
    _require(isinstance(weights_doc, dict) and set(weights_doc) <= {
        "stretch", "bending", "collision", "gravity", "friction", "inertia"},
        "weights must map loss-term names to floats")
    base = Path(path).parent
    scene_paths = [str(p) if Path(p).is_absolute() else str(base / p) for p in doc["scenes"]]
    kwargs = {k: doc[k] for k in doc if k not in ("scenes", "weights")}
    try:
        return TrainConfig(scenes=scene_paths, weights=LossWeights(**weights_doc), **kwargs)
    except (TypeError, InvalidArgument) as exc:
        raise FormatError(f"{path}: bad training config: {exc}") from exc
