"""Bit-exact checkpoint format.

Layout (all integers little-endian):

    magic "MALK" | u16 version | u32 meta_len | meta (UTF-8 JSON)
    | u32 n_tensors | tensor*

    tensor := u16 name_len | name UTF-8 | u8 dtype_tag (1 = f64)
              | u8 ndim | u64 dims[ndim] | row-major LE f64 payload

The meta block echoes the fully-resolved run config plus the RNG algorithm
id and seed, so analyses never need the original config file. Writes are
atomic (temp file + rename); load(save(x)) round-trips bitwise.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from . import harness, moe
from .errors import FormatError, SchemaError, UnsupportedMethod

MAGIC = b"MALK"
VERSION = 1
DTYPE_F64 = 1


def write_bytes_atomic(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-malk-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path: str, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


def checkpoint_bytes(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(meta_blob)), meta_blob]
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<BB", DTYPE_F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], meta: dict) -> None:
    write_bytes_atomic(path, checkpoint_bytes(tensors, meta))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.blob):
            raise FormatError(
                f"truncated checkpoint reading {what} at byte {self.offset}",
                offset=self.offset,
            )
        out = self.blob[self.offset : self.offset + count]
        self.offset += count
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a MALK checkpoint", offset=0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unknown checkpoint version {version}", offset=4)
    (meta_len,) = r.unpack("<I", "meta length")
    meta_blob = r.take(meta_len, "meta block")
    try:
        meta = json.loads(meta_blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable meta block: {exc}", offset=10) from exc
    (n_tensors,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        dtype_tag, ndim = r.unpack("<BB", "tensor header")
        if dtype_tag != DTYPE_F64:
            raise FormatError(
                f"unknown dtype tag {dtype_tag} for tensor {name!r}",
                offset=r.offset - 2,
            )
        dims = r.unpack(f"<{ndim}Q", "tensor dims")
        count = int(np.prod(dims)) if ndim else 1
        payload = r.take(8 * count, f"tensor {name!r} payload")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if r.offset != len(blob):
        raise FormatError(
            f"{len(blob) - r.offset} trailing bytes after tensor table",
            offset=r.offset,
        )
    return tensors, meta


# ------------------------------------------------------- model round-trip


def run_meta(config_echo: dict, seed: int) -> dict:
    from .linalg import RNG_ALGORITHM

    return {
        "config": config_echo,
        "seed": seed,
        "rng_algorithm": RNG_ALGORITHM,
        "init_convention": "kaiming-uniform bound sqrt(6/fan_in), fan_in=cols",
        "format": VERSION,
    }


def save_model(path: str, model: harness.AdapterModel, meta: dict) -> None:
    save_checkpoint(path, model.tensors(), meta)


def _expect(tensors: dict, name: str, shape: tuple) -> np.ndarray:
    if name not in tensors:
        raise SchemaError(f"checkpoint missing tensor {name!r}")
    arr = tensors[name]
    if arr.shape != shape:
        raise SchemaError(f"tensor {name!r} has shape {arr.shape}, config says {shape}")
    return arr


def load_model(path: str) -> tuple[harness.AdapterModel, dict]:
    tensors, meta = load_checkpoint(path)
    config = _train_config_from_echo(meta["config"])
    name = "site0"
    base_name = f"{name}.base_w"
    if base_name not in tensors:
        raise SchemaError(f"checkpoint missing tensor {base_name!r}")
    base_w = tensors[base_name]
    model = harness.build_model(config, base_w, _ZeroRng())
    for key, arr, _ in model.param_specs():
        arr[:] = _expect(tensors, key, arr.shape)
    extra = set(tensors) - {k for k, _, _ in model.param_specs()} - {base_name}
    if extra:
        raise SchemaError(f"unexpected tensors in checkpoint: {sorted(extra)}")
    return model, meta


def require_moe(model: harness.AdapterModel) -> None:
    if not isinstance(model.layer, (moe.MoloraLayer, moe.MaloraLayer)):
        raise UnsupportedMethod(
            f"method {model.method!r} has no experts to analyze"
        )


class _ZeroRng:
    """Placeholder stream for shape-only construction before tensors load."""

    def uniform(self, low, high, shape):
        return np.zeros(shape)

    def normal(self, shape, scale=1.0):
        return np.zeros(shape)

    @property
    def generator(self):
        return np.random.default_rng(0)

    def child(self, *keys):
        return self


def _train_config_from_echo(echo: dict) -> harness.TrainConfig:
    from .config import train_config_from_dict

    return train_config_from_dict(echo)
