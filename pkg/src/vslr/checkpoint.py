"""Flat binary checkpoint format for named parameter tensors.

Layout (all integers little-endian):

    magic      4 bytes  b"VSLR"
    version    u32      currently 1
    width      u8       scalar width in bytes: 4 (float32) or 8 (float64)
    count      u32      number of entries
    entry*     name_len u32, name utf-8 bytes, rank u32, extents u64 each,
               raw little-endian scalar payload (C order)

Round trips are bit exact: payloads are written with tobytes() and read
with frombuffer(), never re-encoded.
"""

from __future__ import annotations

import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"VSLR"
VERSION = 1

_WIDTH_TO_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(path, params: dict) -> None:
    """Write a name -> Tensor/ndarray mapping; all entries share one dtype."""
    items = []
    width = None
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        w = arr.dtype.itemsize
        if arr.dtype.kind != "f" or w not in _WIDTH_TO_DTYPE:
            raise TypeError(f"checkpoint: parameter {name!r} has unsupported dtype {arr.dtype}")
        if width is None:
            width = w
        elif w != width:
            raise TypeError(f"checkpoint: parameter {name!r} mixes scalar widths {w} and {width}")
        # asarray keeps 0-d shapes; ascontiguousarray would promote them to 1-d
        items.append((name, np.asarray(arr, dtype=_WIDTH_TO_DTYPE[w], order="C")))
    if width is None:
        raise ValueError("checkpoint: nothing to save")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IBI", VERSION, width, len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    """Read back a name -> ndarray mapping written by save_checkpoint."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"checkpoint: bad magic in {path}")
    version, width, count = struct.unpack_from("<IBI", blob, 4)
    if version != VERSION:
        raise ValueError(f"checkpoint: unsupported version {version}")
    dtype = _WIDTH_TO_DTYPE.get(width)
    if dtype is None:
        raise ValueError(f"checkpoint: unsupported scalar width {width}")
    off = 4 + 9
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=off).reshape(shape)
        off += n * width
        out[name] = arr.copy()
    if off != len(blob):
        raise ValueError(f"checkpoint: {len(blob) - off} trailing bytes in {path}")
    return out


def load_into(params: dict, loaded: dict) -> None:
    """Copy loaded arrays into model tensors; names and shapes must match."""
    missing = sorted(set(params) - set(loaded))
    extra = sorted(set(loaded) - set(params))
    if missing or extra:
        raise ValueError(f"checkpoint: name mismatch, missing={missing} unexpected={extra}")
    for name, tensor in params.items():
        arr = loaded[name]
        if tuple(arr.shape) != tuple(tensor.data.shape):
            raise ValueError(
                f"checkpoint: shape mismatch for {name!r}: file {arr.shape}, model {tensor.data.shape}"
            )
        tensor.data = arr.astype(tensor.data.dtype, copy=True)
