# retrieval_xattn/checkpoint.py
#
# Weight checkpoints: b"ULMF", u32 version, u32-prefixed JSON config block,
# then named tensors until EOF as
#   u32 name length | name bytes | u64 rows | u64 cols | rows*cols little-endian f32

from __future__ import annotations

import contextlib
import json
import logging
import os
import struct

import numpy as np

from .errors import ConfigError, StorageError
from .model import ModelConfig, ModelWeights, parameter_shapes

logger = logging.getLogger(__name__)

MAGIC = b"ULMF"
VERSION = 1

_U32 = struct.Struct("<I")
_U64X2 = struct.Struct("<QQ")


def save_checkpoint(path: str, weights: ModelWeights) -> None:
    config_block = json.dumps(weights.config.to_dict(), sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(_U32.pack(VERSION))
            f.write(_U32.pack(len(config_block)))
            f.write(config_block)
            for name in parameter_shapes(weights.config):
                arr = np.ascontiguousarray(weights.params[name], dtype="<f4")
                raw = name.encode("utf-8")
                f.write(_U32.pack(len(raw)))
                f.write(raw)
                f.write(_U64X2.pack(*arr.shape))
                f.write(arr.tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        with contextlib.suppress(OSError):
            os.remove(tmp)
        raise StorageError(f"cannot write checkpoint {path}: {exc}")
    logger.info("checkpoint written to %s", path)


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise StorageError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path: str) -> ModelWeights:
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise StorageError(f"cannot open checkpoint {path}: {exc}")
    with f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise StorageError(f"{path} is not a checkpoint (bad magic)")
        (version,) = _U32.unpack(_read_exact(f, 4, "version"))
        if version != VERSION:
            raise StorageError(f"unsupported checkpoint version {version}")
        (cfg_len,) = _U32.unpack(_read_exact(f, 4, "config length"))
        try:
            config = ModelConfig.from_dict(json.loads(_read_exact(f, cfg_len, "config")))
        except (ValueError, ConfigError) as exc:
            raise StorageError(f"corrupt config block in {path}: {exc}")

        params: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise StorageError("truncated checkpoint while reading tensor name length")
            (name_len,) = _U32.unpack(head)
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            rows, cols = _U64X2.unpack(_read_exact(f, 16, f"shape of {name}"))
            data = _read_exact(f, rows * cols * 4, f"data of {name}")
            params[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(rows, cols)

    expected = parameter_shapes(config)
    missing = [n for n in expected if n not in params]
    if missing:
        raise StorageError(f"checkpoint {path} is missing tensors: {', '.join(missing[:5])}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise StorageError(f"tensor {name} has shape {params[name].shape}, expected {shape}")
    return ModelWeights(config, {n: params[n] for n in expected})
