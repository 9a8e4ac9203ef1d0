"""Binary checkpoint files for parameters (magic SFWT) and optimizer state (SFOP).

Layout: magic 4 bytes, version u16, count u32, then per entry
name_len u16, UTF-8 name, rank u8, extents u32 each, float32 little-endian data.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .optim import AdamState
from .tensor import GridError, Tensor

PARAM_MAGIC = b"SFWT"
OPTIM_MAGIC = b"SFOP"
VERSION = 1
_MAX_RANK = 255


class CheckpointError(IOError):
    """Malformed checkpoint file; message carries the byte offset."""


def save_arrays(path, arrays: Mapping[str, np.ndarray], magic: bytes = PARAM_MAGIC) -> None:
    if magic not in (PARAM_MAGIC, OPTIM_MAGIC):
        raise GridError(f"unknown checkpoint magic {magic!r}")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<HI", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            if arr.ndim > _MAX_RANK:
                raise GridError(f"array '{name}' rank {arr.ndim} not storable")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.tobytes(order="C"))


def load_arrays(path, magic: bytes = PARAM_MAGIC) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(offset: int, n: int, what: str) -> bytes:
        if offset + n > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {what} at byte {offset} "
                                  f"(need {n}, have {len(blob) - offset})")
        return blob[offset:offset + n]

    if need(0, 4, "magic") != magic:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r} at byte 0, expected {magic!r}")
    version, count = struct.unpack("<HI", need(4, 6, "header"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at byte 4")
    offset = 10
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(offset, 2, "name length"))
        offset += 2
        name = need(offset, name_len, "name").decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack("<B", need(offset, 1, "rank"))
        offset += 1
        shape = []
        for _ in range(rank):
            (extent,) = struct.unpack("<I", need(offset, 4, "extent"))
            shape.append(extent)
            offset += 4
        n_values = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = need(offset, 4 * n_values, f"data of '{name}'")
        offset += 4 * n_values
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes at byte {offset}")
    return arrays


def save_params(path, params: Mapping[str, Tensor]) -> None:
    save_arrays(path, {name: p.data for name, p in params.items()}, PARAM_MAGIC)


def load_params_into(path, params: Mapping[str, Tensor]) -> None:
    arrays = load_arrays(path, PARAM_MAGIC)
    missing = set(params) - set(arrays)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    for name, p in params.items():
        arr = arrays[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{path}: parameter '{name}' has shape {arr.shape}, "
                                  f"model expects {p.data.shape}")
        p.data = arr.copy()


def save_adam(path, state: AdamState) -> None:
    arrays: dict[str, np.ndarray] = {
        "__step__": np.array([state.step], dtype=np.float32),
        "__hyper__": np.array([state.learning_rate, state.beta1, state.beta2, state.eps],
                              dtype=np.float32),
    }
    for name, arr in state.m.items():
        arrays["m::" + name] = arr
    for name, arr in state.v.items():
        arrays["v::" + name] = arr
    save_arrays(path, arrays, OPTIM_MAGIC)


def load_adam(path) -> AdamState:
    arrays = load_arrays(path, OPTIM_MAGIC)
    try:
        step = int(arrays.pop("__step__")[0])
        lr, b1, b2, eps = (float(x) for x in arrays.pop("__hyper__"))
    except KeyError as exc:
        raise CheckpointError(f"{path}: optimizer checkpoint missing {exc}") from exc
    state = AdamState(learning_rate=lr, beta1=b1, beta2=b2, eps=eps, step=step)
    for name, arr in arrays.items():
        if name.startswith("m::"):
            state.m[name[3:]] = arr
        elif name.startswith("v::"):
            state.v[name[3:]] = arr
        else:
            raise CheckpointError(f"{path}: unexpected entry '{name}' in optimizer state")
    return state
