"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"VITLCKPT"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON header: kind, config, metadata, tensor table
    ...       tensor payloads, concatenated in table order
    u32       CRC-32 of every preceding byte

Each table entry holds ``name``, ``dtype`` (numpy ``str`` form, always
little-endian), ``shape``, ``offset`` (relative to the payload start) and
``nbytes``.  Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, ChecksumError, ContractError, TruncatedCheckpointError,
                     UnknownTensorError, VersionMismatchError)
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"VITLCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_CRC = struct.Struct("<I")


@dataclass
class Checkpoint:
    """Named arrays plus the configuration that produced them."""

    kind: str
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    table, blobs, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = _le(np.asarray(arr))
        if arr.dtype.hasobject:
            raise ContractError(f"tensor {name!r} has object dtype")
        blob = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str,
                      "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"kind": ckpt.kind, "config": ckpt.config, "metadata": ckpt.metadata,
                         "tensors": table}, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)
    return body + _CRC.pack(zlib.crc32(body))


def decode_checkpoint(raw: bytes) -> Checkpoint:
    """Parse checkpoint bytes.

    Raises:
        BadMagicError: wrong signature.
        VersionMismatchError: unsupported format version.
        TruncatedCheckpointError: file shorter than its header declares.
        ChecksumError: contents altered after writing.
    """
    if raw[:len(MAGIC)] != MAGIC[:len(raw)]:
        raise BadMagicError("not a checkpoint file (bad magic)")
    if len(raw) < _PREFIX.size:
        raise TruncatedCheckpointError(f"file has {len(raw)} bytes, shorter than the fixed prefix")
    _, version, hlen = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise TruncatedCheckpointError("file ends inside the header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"header is not valid JSON: {exc}") from exc
    payload = sum(int(t["nbytes"]) for t in header["tensors"])
    if len(raw) < start + payload + _CRC.size:
        raise TruncatedCheckpointError(
            f"file has {len(raw)} bytes, header declares {start + payload + _CRC.size}")
    end = start + payload
    (stored,) = _CRC.unpack_from(raw, end)
    if len(raw) != end + _CRC.size or zlib.crc32(raw[:end]) != stored:
        raise ChecksumError("checksum mismatch; file is corrupt")
    tensors = {}
    for t in header["tensors"]:
        lo = start + int(t["offset"])
        n = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"]), count=n, offset=lo)
        tensors[t["name"]] = arr.reshape(t["shape"]).copy()
    return Checkpoint(header["kind"], tensors, header["config"], header["metadata"])


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write atomically: a failed write never leaves a partial file at ``path``."""
    path = Path(path)
    data = encode_checkpoint(ckpt)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def tensor_names(path: str | Path) -> list[str]:
    return list(load_checkpoint(path).tensors)


# ---------------------------------------------------------------- model state


def state_dict(params: dict[str, Tensor], prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.data for k, v in params.items()}


def load_state(params: dict[str, Tensor], tensors: dict[str, np.ndarray], strict: bool = True,
               prefix: str = "") -> None:
    """Copy ``tensors`` (names carrying ``prefix``) into ``params``.

    Raises:
        UnknownTensorError: on a strict load with names ``params`` lacks,
            or with parameters the file does not provide.
        ContractError: on a shape or dtype mismatch.
    """
    mine = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    unknown = sorted(set(mine) - set(params))
    missing = sorted(set(params) - set(mine))
    if strict and (unknown or missing):
        raise UnknownTensorError(f"unknown tensors {unknown}, missing tensors {missing}")
    for name, arr in mine.items():
        if name not in params:
            continue
        p = params[name]
        if arr.shape != p.data.shape or arr.dtype != p.data.dtype:
            raise ContractError(f"{name}: file has {arr.dtype}{arr.shape}, "
                                f"model expects {p.data.dtype}{p.data.shape}")
    for name, arr in mine.items():
        if name in params:
            params[name].data = arr.copy()


def encoder_tensors(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    """Encoder weights under their bare names.

    Decoder, distillation and probe tensors are dropped with a logged notice.
    """
    skip = ("decoder.", "distill.", "probe.")
    dropped = [k for k in ckpt.tensors if k.startswith(skip)]
    if dropped:
        log.info("dropping %d non-encoder tensors from %s checkpoint (e.g. %s)",
                 len(dropped), ckpt.kind, dropped[0])
    return {k.removeprefix("encoder."): v for k, v in ckpt.tensors.items()
            if not k.startswith(skip)}
