"""Self-describing binary container for kernel tables and sector states.

Layout::

    b"QLBEBIN\\0"              8-byte magic
    uint32 LE                  format version
    uint64 LE                  header length in bytes
    header                     UTF-8 JSON (sorted keys)
    payload                    blocks of little-endian float64 (re, im) pairs

Each block is listed in ``header["blocks"]`` with name, shape and byte
offset relative to the payload start.  The main block is row-major
(P-index, Q-index).  ``header["checksum"]`` is the SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ContainerError
from .grid import MomentumGrid

MAGIC = b"QLBEBIN\0"
VERSION = 1


def _as_pairs(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(np.asarray(arr, dtype=np.complex128)).astype("<c16").tobytes()


def write_container(path, kind: str, header: dict, blocks: dict[str, np.ndarray]) -> str:
    """Write ``blocks`` (name -> array) with ``header``; returns the payload checksum."""
    payload = bytearray()
    layout = []
    for name, arr in blocks.items():
        raw = _as_pairs(arr)
        layout.append({"name": name, "shape": list(np.shape(arr)), "offset": len(payload),
                       "complex": bool(np.iscomplexobj(arr))})
        payload += raw
    checksum = hashlib.sha256(payload).hexdigest()
    head = dict(header)
    head.update({"kind": kind, "version": VERSION, "blocks": layout, "checksum": checksum})
    text = json.dumps(head, sort_keys=True, default=_json_default).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(text)))
        fh.write(text)
        fh.write(payload)
    os.replace(tmp, path)
    return checksum


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_head(fh)[0]


def _read_head(fh):
    magic = fh.read(8)
    if magic != MAGIC:
        raise ContainerError("not a table container (bad magic)")
    raw = fh.read(12)
    if len(raw) != 12:
        raise ContainerError("truncated container header")
    version, length = struct.unpack("<IQ", raw)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    text = fh.read(length)
    if len(text) != length:
        raise ContainerError("truncated container header")
    try:
        header = json.loads(text.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed header: {exc}") from None
    return header, 20 + length


def read_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify a container; returns (header, blocks)."""
    with open(path, "rb") as fh:
        header, _ = _read_head(fh)
        payload = fh.read()
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"expected a {kind!r} container, found {header.get('kind')!r}")
    if hashlib.sha256(payload).hexdigest() != header.get("checksum"):
        raise ContainerError("checksum mismatch: container is corrupted")
    blocks = {}
    for b in header["blocks"]:
        count = int(np.prod(b["shape"])) if b["shape"] else 1
        start = b["offset"]
        stop = start + 16 * count
        if stop > len(payload):
            raise ContainerError(f"block {b['name']!r} runs past the payload")
        arr = np.frombuffer(payload[start:stop], dtype="<c16").reshape(b["shape"]).astype(np.complex128)
        blocks[b["name"]] = arr if b["complex"] else arr.real.copy()
    return header, blocks


# ---------------------------------------------------------------------------
# typed front-ends
# ---------------------------------------------------------------------------


def save_table(path, table) -> str:
    meta = dict(table.metadata)
    meta["grid"] = table.grid.spec()
    meta["delta"] = table.delta.tolist()
    blocks = {"values": table.values, "m_out": table.m_out, "zero_cell": table.zero_cell, "lost": table.lost}
    return write_container(path, "kernel_table", {"metadata": meta}, blocks)


def load_table(path):
    from .kernels import KernelTable

    header, blocks = read_container(path, "kernel_table")
    meta = header["metadata"]
    try:
        grid = MomentumGrid(**meta["grid"])
        table = KernelTable(
            grid=grid,
            delta=np.asarray(meta["delta"], dtype=np.int64),
            values=blocks["values"],
            m_out=blocks["m_out"],
            zero_cell=blocks["zero_cell"],
            lost=blocks["lost"],
            metadata=meta,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError(f"inconsistent table metadata: {exc}") from None
    if table.values.shape != (grid.size, grid.transfer_offsets.shape[0]):
        raise ContainerError("table shape does not match its grid")
    if meta.get("checksum") and meta["checksum"] != table.checksum():
        raise ContainerError("table content checksum mismatch")
    return table


def save_state(path, state) -> str:
    header = {
        "metadata": {
            "grid": state.grid.spec(),
            "delta": state.delta.tolist(),
            "time": state.time if math.isfinite(state.time) else None,
        }
    }
    return write_container(path, "sector_state", header, {"rho": state.rho})


def load_state(path):
    from .evolution import SectorState

    header, blocks = read_container(path, "sector_state")
    meta = header["metadata"]
    grid = MomentumGrid(**meta["grid"])
    return SectorState(grid, np.asarray(meta["delta"], dtype=np.int64), blocks["rho"], meta["time"] or 0.0)
