"""Binary tensor files and named-tensor containers.

A tensor block is one text line ``shape: d0 d1 ... dn dtype: f32|f64``
followed by the flat little-endian IEEE-754 payload.  A container is a
sequence of ``name: <name>`` lines, each followed by one tensor block.
"""
from __future__ import annotations

import io
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


class TensorFormatError(ValueError):
    pass


def write_block(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    try:
        tag = _NAMES[arr.dtype]
    except KeyError:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}") from None
    dims = " ".join(str(d) for d in arr.shape)
    fh.write(f"shape: {dims} dtype: {tag}\n".encode("ascii"))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def read_block(fh: BinaryIO) -> np.ndarray:
    line = fh.readline()
    if not line:
        raise TensorFormatError("unexpected end of file: missing tensor header")
    text = line.decode("ascii", errors="replace").strip()
    if not text.startswith("shape:") or " dtype: " not in text:
        raise TensorFormatError(f"malformed tensor header {text!r}")
    dims_part, tag = text[len("shape:"):].split(" dtype: ")
    try:
        dtype = _DTYPES[tag.strip()]
        shape = tuple(int(d) for d in dims_part.split())
    except (KeyError, ValueError):
        raise TensorFormatError(f"malformed tensor header {text!r}") from None
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise TensorFormatError(f"truncated payload for tensor of shape {shape}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_block(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_block(fh)


def save_named(path, tensors: Mapping[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    for name, arr in tensors.items():
        if "\n" in name:
            raise TensorFormatError(f"tensor name may not contain newlines: {name!r}")
        buf.write(f"name: {name}\n".encode("utf-8"))
        write_block(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def load_named(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        while True:
            line = fh.readline()
            if not line:
                break
            text = line.decode("utf-8").rstrip("\n")
            if not text.startswith("name: "):
                raise TensorFormatError(f"expected 'name: ...' line, got {text!r}")
            out[text[len("name: "):]] = read_block(fh)
    return out
