"""Versioned binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes  b"VSEDCKPT"
    version      u32
    header_len   u64
    header       UTF-8 JSON: stage, model/train config echo, optimizer step,
                 record count, metadata
    records      repeated: name_len u16, name (UTF-8), ndim u8, dims u32 * ndim,
                 float64 payload, crc32 u32 over (name, dims, payload)
    digest       32 bytes: SHA-256 of everything above

Model parameters are stored under ``<component>.<name>``; AdamW moments under
``optim.m.<param>`` and ``optim.v.<param>``.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .decoder import init_decoder
from .encoders import init_encoder
from .model import ModelConfig, VSEModel
from .trainer import AdamWState, Checkpoint, TrainConfig

MAGIC = b"VSEDCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


def _record(name: str, arr: np.ndarray) -> tuple[bytes, int]:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.tobytes()
    crc = zlib.crc32(head + payload)
    return head + payload + struct.pack("<I", crc), crc


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    arrays: dict[str, np.ndarray] = {k: t.data for k, t in ckpt.model.named_parameters().items()}
    for k, m in sorted(ckpt.optimizer.m.items()):
        arrays[f"optim.m.{k}"] = m
    for k, v in sorted(ckpt.optimizer.v.items()):
        arrays[f"optim.v.{k}"] = v
    body = bytearray()
    checksums = {}
    for name in sorted(arrays):
        rec, crc = _record(name, arrays[name])
        body += rec
        checksums[name] = crc
    header = {
        "stage": ckpt.stage,
        "model_config": ckpt.model.config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "components": [c for c in ("image", "dense", "sparse", "decoder") if getattr(ckpt.model, c) is not None],
        "optimizer_step": ckpt.optimizer.step,
        "n_records": len(arrays),
        "record_crc32": checksums,
        "meta": ckpt.meta,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hb)) + hb + bytes(body)
    return blob + hashlib.sha256(blob).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_checkpoint(ckpt))
    return path


def loads_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 12 + 32:
        raise CheckpointError("checkpoint file too short")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint digest mismatch (file corrupted or truncated)")
    if body[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    version, hlen = struct.unpack_from("<IQ", body, 8)
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version} != supported {FORMAT_VERSION}")
    off = 20
    try:
        header = json.loads(body[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint header unreadable: {e}") from None
    off += hlen
    arrays: dict[str, np.ndarray] = {}
    for _ in range(header["n_records"]):
        start = off
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        payload = body[off:off + 8 * count]
        off += 8 * count
        (crc,) = struct.unpack_from("<I", body, off)
        if zlib.crc32(body[start:off]) != crc or header["record_crc32"].get(name) != crc:
            raise ChecksumError(f"checksum mismatch in parameter record {name!r}")
        off += 4
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if off != len(body):
        raise CheckpointError(f"{len(body) - off} trailing bytes after parameter records")

    mc = ModelConfig.from_dict(header["model_config"])
    rng = np.random.default_rng(0)
    model = VSEModel(mc, init_encoder(mc.image_config(), rng), init_encoder(mc.text_config(), rng))
    if "sparse" in header["components"]:
        model.sparse = init_encoder(mc.text_config(), rng)
    if "decoder" in header["components"]:
        model.decoder = init_decoder(mc.decoder_config(), rng)
    model.load_named_arrays({k: v for k, v in arrays.items() if not k.startswith("optim.")})
    opt = AdamWState(int(header["optimizer_step"]),
                     {k[len("optim.m."):]: v for k, v in arrays.items() if k.startswith("optim.m.")},
                     {k[len("optim.v."):]: v for k, v in arrays.items() if k.startswith("optim.v.")})
    return Checkpoint(header["stage"], model, TrainConfig.from_dict(header["train_config"]), opt, header["meta"])


def load_checkpoint(path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())


def record_checksums(ckpt: Checkpoint) -> dict[str, int]:
    """Per-parameter CRC32 values as they would be written."""
    return {k: _record(k, t.data)[1] for k, t in ckpt.model.named_parameters().items()}


__all__ = ["save_checkpoint", "load_checkpoint", "dumps_checkpoint", "loads_checkpoint", "CheckpointError",
           "ChecksumError", "VersionError", "record_checksums", "MAGIC", "FORMAT_VERSION"]
