"""Versioned binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"SPHRCKPT"
    version      u32
    header_len   u32
    header       header_len bytes of UTF-8 "key=value" lines
    count        u32
    count x {
        name_len u32, name bytes,
        ndim u32, dims u64 * ndim,
        nbytes u64, float64 little-endian data
    }

Tensors are written in declaration order. Reading back gives bit-identical
arrays. The same container holds dumped adversarial batches (``kind=adv-batch``).
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .spherehead import ArchitectureSpec, HeadConfig, ModelParams

MAGIC = b"SPHRCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_blobs(path, header: Mapping[str, str], tensors: Mapping[str, np.ndarray]) -> None:
    lines = []
    for k, v in header.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise CheckpointError(f"header entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}")
    head = "\n".join(lines).encode("utf-8")
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head,
           struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(struct.pack("<Q", arr.nbytes) + arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def read_blobs(path):
    """Return (header dict, ordered dict of arrays)."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(8) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, hlen = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {FORMAT_VERSION})")
    header = {}
    for line in take(hlen).decode("utf-8").split("\n"):
        if line:
            k, _, v = line.partition("=")
            header[k] = v
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor {name!r}: byte count {nbytes} does not match shape {shape}")
        tensors[name] = np.frombuffer(take(nbytes), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last tensor")
    return header, tensors


def save_checkpoint(path, params: ModelParams, head: HeadConfig, extra: Mapping[str, str] | None = None) -> None:
    header = {"kind": "model"}
    header.update({f"arch.{k}": v for k, v in params.arch.to_dict().items()})
    header.update({"head.mode": head.mode, "head.s": repr(float(head.s)), "head.m": repr(float(head.m))})
    if extra:
        header.update(extra)
    write_blobs(path, header, params.named())


def load_checkpoint(path):
    """Return (ModelParams, HeadConfig, header)."""
    header, tensors = read_blobs(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    arch = ArchitectureSpec.from_dict({k[5:]: v for k, v in header.items() if k.startswith("arch.")})
    head = HeadConfig(header["head.mode"], float(header["head.s"]), float(header["head.m"]))
    omega = {k: v for k, v in tensors.items() if k not in ("W", "b")}
    return ModelParams(arch, omega, tensors["W"], tensors["b"]), head, header
