# checkpoint.py - Functions to save and load network checkpoints
'''
Binary layout, all integers little-endian u32:

  b"RSHZ" | version | len(config) config | tensor count |
  per tensor: len(name) name | ndim | dims... | float32 payload (little-endian)
  | sha256 of every preceding byte (32 bytes)

The config block is the canonical key=value text of the NetConfig, so saving
a loaded checkpoint reproduces the file byte for byte.
'''

import hashlib
import os
import struct
import sys
import tempfile

import numpy as np

sys.path.insert(0, os.path.dirname(__file__))
from autograd import ParamStore
from config import ConfigError, format_net_config, net_config_from_dict, parse_key_values
from utils import logger

MAGIC = b"RSHZ"
VERSION = 1
DIGEST_SIZE = 32
PAYLOAD_DTYPE = np.dtype("<f4")


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def _u32(value):
    return struct.pack("<I", value)


def serialize(cfg, store):
    config = format_net_config(cfg).encode("utf-8")
    chunks = [MAGIC, _u32(VERSION), _u32(len(config)), config, _u32(len(store))]
    for name, param in store.items():
        encoded = name.encode("utf-8")
        chunks += [_u32(len(encoded)), encoded, _u32(param.value.ndim)]
        chunks += [_u32(dim) for dim in param.value.shape]
        chunks.append(np.ascontiguousarray(param.value, dtype=PAYLOAD_DTYPE).tobytes())
    body = b"".join(chunks)
    return body + hashlib.sha256(body).digest()


class _Cursor:
    def __init__(self, data, offset):
        self.data, self.offset = data, offset

    def take(self, size):
        if self.offset + size > len(self.data):
            raise CheckpointFormatError("checkpoint ends in the middle of a record")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def deserialize(data):
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointFormatError(f"not a checkpoint: magic {data[:4]!r} != {MAGIC!r}")
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    if len(data) < 8 + DIGEST_SIZE:
        raise CheckpointFormatError("checkpoint is truncated")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointChecksumError("checkpoint checksum mismatch: the file is corrupt")

    cursor = _Cursor(body, 8)
    try:
        text = cursor.take(cursor.u32()).decode("utf-8")
        cfg = net_config_from_dict(parse_key_values(text)["net"])
        store = ParamStore(np.float32)
        for _ in range(cursor.u32()):
            name = cursor.take(cursor.u32()).decode("utf-8")
            shape = tuple(cursor.u32() for _ in range(cursor.u32()))
            count = int(np.prod(shape))
            payload = cursor.take(count * PAYLOAD_DTYPE.itemsize)
            store.add(name, np.frombuffer(payload, dtype=PAYLOAD_DTYPE).reshape(shape))
    except (UnicodeDecodeError, ConfigError, KeyError) as error:
        raise CheckpointFormatError(f"checkpoint contents are invalid: {error}") from None
    if cursor.offset != len(body):
        raise CheckpointFormatError(f"{len(body) - cursor.offset} stray bytes after the last tensor")
    return cfg, store


def save_checkpoint(path, cfg, params):
    path = str(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    data = serialize(cfg, params)
    handle = tempfile.NamedTemporaryFile(dir=directory, prefix=".rshz-", delete=False)
    try:
        with handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(handle.name, path)
    except BaseException:
        if os.path.exists(handle.name):
            os.unlink(handle.name)
        raise
    logger.info(f"✅ Saved checkpoint {path} ({len(params)} tensors, {len(data)} bytes)")
    return path


def load_checkpoint(path):
    path = str(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, "rb") as the_file:
        cfg, store = deserialize(the_file.read())
    logger.info(f"✅ Loaded checkpoint {path}: {len(store)} tensors, {store.count()} parameters")
    return cfg, store
