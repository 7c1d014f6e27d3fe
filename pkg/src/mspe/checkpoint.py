"""Minimal named-tensor container.

Layout (all little-endian)::

    b"MSPE" | version u32 | count u32
    count x { name_len u32 | name utf-8 | dtype tag u8 | rank u32 | dims u64[rank] | offset u64 }
    payloads (raw IEEE-754 / two's complement), at absolute byte offsets
"""

from __future__ import annotations

import struct

import numpy as np

from .data import atomic_write
from .patch_embed import PatchKernelBank
from .vit import ViTParams

MAGIC = b"MSPE"
VERSION = 1

DTYPE_TAGS = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
    4: np.dtype("<i4"),
    5: np.dtype("u1"),
}
_TAG_OF = {v.newbyteorder("="): k for k, v in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def encode_checkpoint(tensors: dict) -> bytes:
    entries = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _TAG_OF.get(arr.dtype.newbyteorder("="))
        if tag is None:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        entries.append((name.encode("utf-8"), tag, arr))
    dir_size = 12 + sum(4 + len(n) + 1 + 4 + 8 * a.ndim + 8 for n, _, a in entries)
    head = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    payload = []
    offset = dir_size
    for name, tag, arr in entries:
        head.append(struct.pack("<I", len(name)) + name + struct.pack("<BI", tag, arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<Q", offset))
        data = np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes()
        payload.append(data)
        offset += len(data)
    return b"".join(head + payload)


def decode_checkpoint(raw: bytes) -> dict:
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError("not an MSPE checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    pos = 12
    spans = []
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            if pos + nlen > len(raw):
                raise CheckpointError(f"corrupt directory: name runs past end of file at byte {pos}")
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BI", raw, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            (offset,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            if tag not in DTYPE_TAGS:
                raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag}")
            if name in out:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            dtype = DTYPE_TAGS[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(raw):
                raise CheckpointError(f"tensor {name!r}: payload [{offset}, {offset + nbytes}) past end of file")
            spans.append((offset, offset + nbytes, name))
            out[name] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset) \
                .reshape(dims).astype(dtype.newbyteorder("="))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt directory at byte {pos}: {exc}") from None
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0 and e1 > s1 and e0 > s0:
            raise CheckpointError(f"tensors {n0!r} and {n1!r} overlap")
    if spans and spans[0][0] < pos and spans[0][1] > spans[0][0]:
        raise CheckpointError(f"tensor {spans[0][2]!r} overlaps the directory")
    return out


def save_checkpoint(path, tensors: dict) -> None:
    atomic_write(path, encode_checkpoint(tensors))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def state_to_tensors(params, kernel, bias, bank=None, base_resolution=None) -> dict:
    """Flatten a model (encoder, single kernel, optional bank) to named tensors."""
    out = {
        "meta.dim": np.int64(params.dim),
        "meta.depth": np.int64(params.depth),
        "meta.heads": np.int64(params.heads),
        "meta.grid": np.int64(params.grid),
        "meta.num_classes": np.int64(params.num_classes),
        "meta.mlp_ratio": np.int64(params.mlp_ratio),
        "meta.base_resolution": np.int64(base_resolution if base_resolution is not None
                                         else params.grid * kernel.shape[0]),
    }
    out.update({f"vit.{k}": v for k, v in params.tensors.items()})
    out["embed.kernel"] = kernel
    out["embed.bias"] = bias
    if bank is not None:
        out["bank.anchors"] = np.asarray(bank.anchors, dtype=np.int64)
        out["bank.resize"] = np.frombuffer(bank.resize.encode(), dtype=np.uint8)
        out["bank.method"] = np.frombuffer(bank.method.encode(), dtype=np.uint8)
        for i, (k, b) in enumerate(zip(bank.kernels, bank.biases)):
            out[f"bank.kernel.{i}"] = k
            out[f"bank.bias.{i}"] = b
    return out


def state_from_tensors(t: dict):
    """Inverse of :func:`state_to_tensors`: (params, kernel, bias, bank | None, base_resolution)."""
    try:
        meta = {k[5:]: int(v) for k, v in t.items() if k.startswith("meta.")}
        params = ViTParams(meta["dim"], meta["depth"], meta["heads"], meta["grid"], meta["num_classes"],
                           {k[4:]: v for k, v in t.items() if k.startswith("vit.")}, meta["mlp_ratio"])
        kernel, bias = t["embed.kernel"], t["embed.bias"]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing {exc.args[0]}") from None
    bank = None
    if "bank.anchors" in t:
        k = len(t["bank.anchors"])
        bank = PatchKernelBank(
            [t[f"bank.kernel.{i}"] for i in range(k)], [t[f"bank.bias.{i}"] for i in range(k)],
            params.grid, bytes(t["bank.resize"]).decode(), bytes(t["bank.method"]).decode(),
            [tuple(a) for a in t["bank.anchors"].tolist()],
        )
    return params, kernel, bias, bank, meta["base_resolution"]
