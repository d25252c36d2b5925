"""Binary tensor container and model checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes  b"RULCKPT\\0"
    version      u32
    dtype code   u8       1 = float32, 2 = float64
    meta length  u64      followed by that many bytes of UTF-8 JSON
                          (sorted keys, compact separators)
    tensor count u64
    per tensor:
      name length u32, name bytes (UTF-8)
      rank        u32
      dims        rank x u64
      values      prod(dims) x dtype, row-major little-endian

For checkpoints the JSON holds ``{"model": ModelConfig, "pipeline": PipelineConfig}``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ModelConfig, ParameterStore, check_params
from .numerics import Tensor
from .preprocess import PipelineConfig

MAGIC = b"RULCKPT\0"
VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(Exception):
    pass


def _le(dt: np.dtype) -> np.dtype:
    return dt.newbyteorder("<")


def encode_container(tensors: dict[str, np.ndarray], meta: dict, dtype=None) -> bytes:
    arrays = {k: np.asarray(v) for k, v in tensors.items()}
    if dtype is None:
        dtype = next(iter(arrays.values())).dtype if arrays else np.dtype(np.float64)
    dtype = np.dtype(dtype)
    if dtype not in DTYPE_CODES:
        raise CheckpointError(f"unsupported dtype {dtype}")
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<IB", VERSION, DTYPE_CODES[dtype]))
    buf.write(struct.pack("<Q", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<Q", len(arrays)))
    for name, arr in arrays.items():
        if arr.dtype != dtype:
            raise CheckpointError(f"tensor {name} is {arr.dtype}, container is {dtype}")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_le(dtype)).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_container(data: bytes) -> tuple[dict[str, np.ndarray], dict, np.dtype]:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, code = r.unpack("<IB")
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    if code not in CODE_DTYPES:
        raise CheckpointError(f"unknown dtype code {code}")
    dtype = CODE_DTYPES[code]
    (mlen,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(mlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}") from None
    (count,) = r.unpack("<Q")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        raw = r.take(n * dtype.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=_le(dtype)).astype(dtype).reshape(dims)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors, meta, dtype


def write_container(path, tensors: dict[str, np.ndarray], meta: dict, dtype=None) -> None:
    Path(path).write_bytes(encode_container(tensors, meta, dtype))


def read_container(path):
    return decode_container(Path(path).read_bytes())


def save_checkpoint(params: ParameterStore, model_cfg: ModelConfig, pipeline_cfg: PipelineConfig, path) -> None:
    check_params(params, model_cfg)
    meta = {"model": model_cfg.to_dict(), "pipeline": asdict(pipeline_cfg)}
    write_container(path, {k: p.data for k, p in params.items()}, meta, np.dtype(model_cfg.dtype))


def load_checkpoint(path, dtype: str | None = None, expect_model: ModelConfig | None = None
                    ) -> tuple[ParameterStore, ModelConfig, PipelineConfig]:
    """Load and verify a checkpoint. ``dtype`` / ``expect_model`` reject files
    that do not match the requested precision or architecture."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    tensors, meta, file_dtype = read_container(path)
    try:
        model_cfg = ModelConfig.from_dict(meta["model"])
        pipeline_cfg = PipelineConfig(**meta["pipeline"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"bad checkpoint config: {e}") from None
    if np.dtype(model_cfg.dtype) != file_dtype:
        raise CheckpointError("header dtype disagrees with stored model config")
    if dtype is not None and np.dtype(dtype) != file_dtype:
        raise CheckpointError(f"checkpoint is {file_dtype}, requested {np.dtype(dtype)}")
    if expect_model is not None and expect_model != model_cfg:
        diff = {k: (v, getattr(expect_model, k)) for k, v in asdict(model_cfg).items()
                if getattr(expect_model, k) != v and not (k == "head_dims" and tuple(v) == expect_model.head_dims)}
        raise CheckpointError(f"checkpoint config does not match (stored, expected): {diff}")
    params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
    try:
        check_params(params, model_cfg)
    except ValueError as e:
        raise CheckpointError(str(e)) from None
    return params, model_cfg, pipeline_cfg
