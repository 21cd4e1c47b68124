"""Tensor blob format: one JSON header line, then little-endian raw floats.

    {"shape": [2, 3], "dtype": "f64"}\n<48 bytes>
"""

from __future__ import annotations

import io
import json
from typing import BinaryIO

import numpy as np

from .tensor import Tensor, dtype_name

_ENDIAN = {"f64": "<f8", "f32": "<f4"}


def dumps(t: Tensor) -> bytes:
    name = dtype_name(t.data.dtype)
    header = json.dumps({"shape": list(t.shape), "dtype": name}).encode("ascii") + b"\n"
    return header + np.ascontiguousarray(t.data, dtype=_ENDIAN[name]).tobytes()


def loads(blob: bytes, requires_grad: bool = False) -> Tensor:
    return read_tensor(io.BytesIO(blob), requires_grad=requires_grad)


def write_tensor(fp: BinaryIO, t: Tensor) -> None:
    fp.write(dumps(t))


def read_tensor(fp: BinaryIO, requires_grad: bool = False) -> Tensor:
    header = json.loads(fp.readline().decode("ascii"))
    shape = tuple(int(n) for n in header["shape"])
    dtype = header["dtype"]
    if dtype not in _ENDIAN:
        raise ValueError(f"unsupported tensor dtype {dtype!r}")
    count = int(np.prod(shape)) if shape else 1
    raw = fp.read(count * np.dtype(_ENDIAN[dtype]).itemsize)
    arr = np.frombuffer(raw, dtype=_ENDIAN[dtype], count=count).reshape(shape)
    return Tensor(arr.astype(np.float32 if dtype == "f32" else np.float64), requires_grad=requires_grad)
