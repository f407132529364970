"""Named-tensor checkpoint container.

Layout, all integers little-endian:

    bytes 0..3    magic "DPD1"
    bytes 4..7    format version (u32) = 1
    bytes 8..15   header length in bytes (u64)
    header        UTF-8 flat key = value text: tensor directory (name ->
                  dtype, byte offset, shape), the model config, sampler
                  defaults, and creation metadata
    payload       contiguous little-endian float32 tensors at the recorded
                  offsets
    trailer       u64 FNV-1a digest over the payload

Working values are float64; storage is float32, so load(save(model))
reproduces every tensor to float32 round-off exactly. Creation metadata
carries no timestamps: outputs of a seeded run are byte-identical across
runs.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from . import __version__
from .errors import CheckpointError
from .kernels import fnv1a64
from .network import DpdConfig, DpdModel

MAGIC = b"DPD1"
FORMAT_VERSION = 1

SAMPLER_DEFAULTS = {
    "cfg_scale": 2.5,
    "schedule": "linear",
    "steps": 20,
    "chunk_count": 4,
}

_CONFIG_FIELDS = ("latent_dim", "hidden_dim", "block_count", "segment_size",
                  "vocab", "heads", "angle_encoder_mode", "seed")


def _header_lines(kind: str, tensors, extra_lines=()):
    lines = [f"container = {kind}", f"created_by = dpd {__version__}"]
    lines.extend(extra_lines)
    offset = 0
    directory = []
    for name, arr in tensors:
        shape = "x".join(str(n) for n in arr.shape)
        lines.append(f"tensor.{name} = f32 {offset} {shape}")
        directory.append((name, offset, arr.shape))
        offset += arr.size * 4
    return lines, directory, offset


def _write_container(path, kind: str, tensors, extra_lines=()):
    lines, directory, payload_len = _header_lines(kind, tensors, extra_lines)
    header = ("\n".join(lines) + "\n").encode("utf-8")
    payload = bytearray(payload_len)
    for (name, offset, _), (_, arr) in zip(directory, tensors):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        payload[offset:offset + len(raw)] = raw
    digest = int(fnv1a64(np.frombuffer(bytes(payload), dtype=np.uint8)))

    blob = (MAGIC + struct.pack("<I", FORMAT_VERSION) +
            struct.pack("<Q", len(header)) + header + bytes(payload) +
            struct.pack("<Q", digest))
    _atomic_write_bytes(path, blob)


def _atomic_write_bytes(path, blob: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_container(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated container (no header)")
    if blob[0:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[0:4]!r}, expected {MAGIC!r}")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header_len = struct.unpack("<Q", blob[8:16])[0]
    if 16 + header_len + 8 > len(blob):
        raise CheckpointError(f"{path}: truncated container (header overruns file)")
    header = blob[16:16 + header_len].decode("utf-8")
    payload = blob[16 + header_len:-8]
    stored_digest = struct.unpack("<Q", blob[-8:])[0]
    actual = int(fnv1a64(np.frombuffer(payload, dtype=np.uint8)))
    if actual != stored_digest:
        raise CheckpointError(f"{path}: payload digest mismatch "
                              f"(stored {stored_digest:#018x}, computed {actual:#018x})")

    fields = {}
    directory = []
    for line in header.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(" = ")
        if not value:
            raise CheckpointError(f"{path}: malformed header line {line!r}")
        if key.startswith("tensor."):
            dtype, offset, shape_s = value.split(" ")
            if dtype != "f32":
                raise CheckpointError(f"{path}: unsupported tensor dtype {dtype!r}")
            shape = tuple(int(n) for n in shape_s.split("x")) if shape_s else ()
            directory.append((key[len("tensor."):], int(offset), shape))
        else:
            fields[key] = value

    seen = set()
    spans = []
    for name, offset, shape in directory:
        if name in seen:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        seen.add(name)
        size = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if offset < 0 or offset + size > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} overruns payload")
        spans.append((offset, offset + size, name))
    spans.sort()
    for (s1, e1, n1), (s2, e2, n2) in zip(spans, spans[1:]):
        if s2 < e1:
            raise CheckpointError(f"{path}: tensors {n1!r} and {n2!r} overlap")
    return fields, directory, payload


def _read_tensor(payload, offset, shape):
    size = int(np.prod(shape, dtype=np.int64))
    flat = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
    return flat.astype(np.float64).reshape(shape)


def save_checkpoint(model: DpdModel, path: str,
                    sampler_defaults: dict | None = None) -> None:
    """Serialize model parameters (float32) plus the embedded config."""
    defaults = dict(SAMPLER_DEFAULTS)
    if sampler_defaults:
        defaults.update(sampler_defaults)
    extra = [f"config.{k} = {getattr(model.config, k)}" for k in _CONFIG_FIELDS]
    extra += [f"sampler.{k} = {v}" for k, v in sorted(defaults.items())]
    extra.append(f"param_count = {model.store.total_parameters()}")
    tensors = [(name, t.data) for name, t in model.store.items()]
    _write_container(path, "model", tensors, extra)


def load_checkpoint(path: str) -> tuple[DpdModel, dict]:
    """Rebuild the model from a container; returns (model, sampler_defaults)."""
    fields, directory, payload = _parse_container(path)
    if fields.get("container") != "model":
        raise CheckpointError(f"{path}: container holds "
                              f"{fields.get('container')!r}, not a model")
    try:
        config = DpdConfig(
            latent_dim=int(fields["config.latent_dim"]),
            hidden_dim=int(fields["config.hidden_dim"]),
            block_count=int(fields["config.block_count"]),
            segment_size=int(fields["config.segment_size"]),
            vocab=int(fields["config.vocab"]),
            heads=int(fields["config.heads"]),
            angle_encoder_mode=fields["config.angle_encoder_mode"],
            seed=int(fields["config.seed"]),
        )
    except KeyError as missing:
        raise CheckpointError(f"{path}: header missing {missing}") from None

    model = DpdModel.init(config)
    loaded = {}
    for name, offset, shape in directory:
        loaded[name] = _read_tensor(payload, offset, shape)
    expected = set(model.store.names())
    if set(loaded) != expected:
        missing = sorted(expected - set(loaded))
        surplus = sorted(set(loaded) - expected)
        raise CheckpointError(f"{path}: tensor set mismatch "
                              f"(missing {missing[:3]}, surplus {surplus[:3]})")
    for name, t in model.store.items():
        if loaded[name].shape != t.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {loaded[name].shape}, "
                f"config implies {t.data.shape}")
        t.data = loaded[name]

    defaults = {}
    for key, value in fields.items():
        if key.startswith("sampler."):
            name = key[len("sampler."):]
            defaults[name] = value if name == "schedule" else float(value)
    return model, defaults


def save_latent(path: str, latent: np.ndarray) -> None:
    """Persist one latent matrix in the same container format."""
    latent = np.asarray(latent, dtype=np.float64)
    _write_container(path, "latent", [("latent", latent)],
                     [f"frames = {latent.shape[0]}",
                      f"channels = {latent.shape[1]}"])


def load_latent(path: str) -> np.ndarray:
    fields, directory, payload = _parse_container(path)
    if fields.get("container") != "latent":
        raise CheckpointError(f"{path}: container holds "
                              f"{fields.get('container')!r}, not a latent")
    for name, offset, shape in directory:
        if name == "latent":
            return _read_tensor(payload, offset, shape)
    raise CheckpointError(f"{path}: no latent tensor present")


def container_info(path: str) -> dict:
    """Header summary for `checkpoint-info`: fields plus tensor directory."""
    fields, directory, payload = _parse_container(path)
    tensors = [(name, shape, int(np.prod(shape, dtype=np.int64)))
               for name, offset, shape in directory]
    total = sum(n for _, _, n in tensors)
    return {"fields": fields, "tensors": tensors, "total_parameters": total}
