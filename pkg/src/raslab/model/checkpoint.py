"""Checkpoint file format.

Layout (little-endian): 4-byte magic "RSLB", uint32 format version,
uint64 header length, UTF-8 JSON header (model config, vocabulary, parameter
manifest), raw float64 parameter blob in manifest order, then a uint32 CRC32
over header + blob. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict

import numpy as np

from .transformer import ModelConfig, StudentModel
from .vocab import Vocab

MAGIC = b"RSLB"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptChecksum(CheckpointError):
    pass


def save_checkpoint(model: StudentModel, path) -> None:
    names = sorted(model.params)
    header = {
        "config": asdict(model.config),
        "vocab": list(model.vocab.tokens),
        "params": [{"name": n, "shape": list(model.params[n].data.shape)} for n in names],
    }
    header_bytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    blob = b"".join(
        np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes() for n in names
    )
    crc = zlib.crc32(header_bytes + blob) & 0xFFFFFFFF
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<I", FORMAT_VERSION))
        handle.write(struct.pack("<Q", len(header_bytes)))
        handle.write(header_bytes)
        handle.write(blob)
        handle.write(struct.pack("<I", crc))


def load_checkpoint(path) -> StudentModel:
    with open(path, "rb") as handle:
        raw = handle.read()
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise CorruptChecksum("not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    header_end = 16 + header_len
    if len(raw) < header_end + 4:
        raise CorruptChecksum("truncated checkpoint")
    header_bytes = raw[16:header_end]
    blob = raw[header_end:-4]
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(header_bytes + blob) & 0xFFFFFFFF != stored_crc:
        raise CorruptChecksum("checksum mismatch")
    header = json.loads(header_bytes.decode("utf-8"))
    config = ModelConfig(**header["config"])
    vocab = Vocab(tokens=tuple(header["vocab"]))
    params = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(blob):
            raise CorruptChecksum("parameter blob shorter than manifest")
        params[entry["name"]] = np.frombuffer(
            blob[offset:end], dtype="<f8"
        ).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(blob):
        raise CorruptChecksum("parameter blob longer than manifest")
    return StudentModel(config, vocab, params=params)
