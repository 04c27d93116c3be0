"""Self-describing binary checkpoint container.

Layout:

    bytes 0..4    magic b"MDCP"
    bytes 4..8    format version, little-endian uint32
    bytes 8..16   header length N, little-endian uint64
    bytes 16..16+N  UTF-8 JSON header
    remainder     raw array payload

The header holds arbitrary JSON metadata under "meta" and an array index
under "arrays": name -> {"dtype": "<f4"-style explicit-endianness tag,
"shape": [...], "offset": int, "nbytes": int}. Offsets are relative to the
start of the payload. Sigmas and other derived quantities are never stored;
only construction parameters go into the metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MDCP"
VERSION = 1

_ALLOWED_DTYPES = {"<f4", "<f8", "<i4", "<i8", "|u1"}


def _le_tag(arr: np.ndarray) -> str:
    kind = arr.dtype.kind
    size = arr.dtype.itemsize
    if kind == "u" and size == 1:
        return "|u1"
    tag = f"<{kind}{size}"
    if tag not in _ALLOWED_DTYPES:
        raise TypeError(f"unsupported checkpoint dtype {arr.dtype}")
    return tag


def save_checkpoint(path: Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    index = {}
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        tag = _le_tag(arr)
        le = arr.astype(np.dtype(tag), copy=False)
        raw = le.tobytes()
        index[name] = {
            "dtype": tag,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": len(raw),
        }
        payload += raw
    header = json.dumps({"meta": meta, "arrays": index}).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError("not a microdiff checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    base = 16 + header_len
    arrays = {}
    for name, spec in header["arrays"].items():
        buf = raw[base + spec["offset"] : base + spec["offset"] + spec["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"])
        arrays[name] = arr.copy()
    return arrays, header["meta"]


def state_dict_to_arrays(prefix: str, state: dict) -> dict[str, np.ndarray]:
    out = {}
    for key, value in state.items():
        tensor = value.detach().cpu() if isinstance(value, torch.Tensor) else torch.as_tensor(value)
        out[f"{prefix}/{key}"] = tensor.numpy()
    return out


def arrays_to_state_dict(prefix: str, arrays: dict[str, np.ndarray]) -> dict:
    head = f"{prefix}/"
    return {
        key[len(head) :]: torch.as_tensor(arr.copy())
        for key, arr in arrays.items()
        if key.startswith(head)
    }


def generator_state_array(gen: torch.Generator) -> np.ndarray:
    return gen.get_state().numpy().astype(np.uint8)


def set_generator_state(gen: torch.Generator, arr: np.ndarray) -> None:
    gen.set_state(torch.from_numpy(np.ascontiguousarray(arr)).to(torch.uint8))
