"""Parameter files: one JSON header line followed by a little-endian float64 block."""

from __future__ import annotations

import hashlib
import json

import numpy as np

MAGIC = "vemrl-params"


class ModelFormatError(ValueError):
    pass


def block_hash(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def dumps_params(header: dict, arrays) -> bytes:
    arrays = [np.asarray(a, dtype="<f8") for a in arrays]
    head = dict(header)
    head["magic"] = MAGIC
    head["shapes"] = [list(a.shape) for a in arrays]
    head["n_params"] = int(sum(a.size for a in arrays))
    head["sha256"] = block_hash(arrays)
    body = b"".join(np.ascontiguousarray(a).tobytes() for a in arrays)
    return json.dumps(head, sort_keys=True).encode() + b"\n" + body


def loads_params(raw: bytes) -> tuple[dict, list[np.ndarray]]:
    nl = raw.find(b"\n")
    if nl < 0:
        raise ModelFormatError("missing header line")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"bad header: {exc}") from None
    if header.get("magic") != MAGIC:
        raise ModelFormatError("not a parameter file")
    body = raw[nl + 1:]
    if len(body) != 8 * header["n_params"]:
        raise ModelFormatError(f"expected {header['n_params']} float64 values, found {len(body) / 8:g}")
    flat = np.frombuffer(body, dtype="<f8")
    arrays, pos = [], 0
    for shape in header["shapes"]:
        n = int(np.prod(shape)) if shape else 1
        arrays.append(flat[pos:pos + n].reshape(shape).copy())
        pos += n
    if block_hash(arrays) != header["sha256"]:
        raise ModelFormatError("content hash mismatch")
    return header, arrays


def save_params(path, header: dict, arrays) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_params(header, arrays))


def load_params(path) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        return loads_params(fh.read())
