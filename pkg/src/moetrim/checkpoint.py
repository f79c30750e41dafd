"""Single-file ``MOEM1`` checkpoints.

Layout (little-endian)::

    b"MOEM1" | version u16 | header_len u32 | header JSON
    | n_tensors u32 | directory entries | payload | crc32 u32

A directory entry is ``name_len u16, name, dtype u8, ndim u8, dims u32 * ndim,
offset u64, nbytes u64``; offsets are relative to the start of the payload.
The CRC covers every preceding byte. Quantized weights are stored as
``<name>.codes`` / ``.scales`` / ``.zeros`` (and ``.channel_scale``) with
their bits and group size in the header, and are dequantized on load.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from moetrim.engine import Attention, Block, Expert, MoELayer, MoEModel, ModelConfig, iter_tensors
from moetrim.errors import ChecksumError, CheckpointError, MagicError, TruncatedError, VersionError
from moetrim.io import atomic_write_bytes
from moetrim.slimming import QuantizedTensor

MAGIC = b"MOEM1"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
DTYPE_TAGS = {v: k for k, v in DTYPES.items()}


def _entries(model: MoEModel):
    """Yield ``(name, array)`` in file order plus the quantization metadata."""
    quant_meta = {}
    out = []
    for name, arr, owner, attr in iter_tensors(model):
        qt = getattr(owner, "quant", {}).get(attr) if isinstance(owner, (Expert, Attention)) else None
        if qt is None:
            out.append((name, arr))
            continue
        quant_meta[name] = {"bits": qt.bits, "group_size": qt.group_size}
        out += [(f"{name}.codes", qt.codes), (f"{name}.scales", qt.scales), (f"{name}.zeros", qt.zeros)]
        if qt.channel_scale is not None:
            out.append((f"{name}.channel_scale", qt.channel_scale))
    for i, b in enumerate(model.blocks):
        if isinstance(b.ffn, MoELayer):
            out.append((f"blocks.{i}.ffn.origins", b.ffn.origins.astype(np.int64)))
            if b.ffn.keep_rows is not None:
                out.append((f"blocks.{i}.ffn.keep_rows", b.ffn.keep_rows.astype(np.int64)))
    return out, quant_meta


def checkpoint_bytes(model: MoEModel) -> bytes:
    entries, quant_meta = _entries(model)
    header = json.dumps({"config": model.config.to_dict(), "quant": quant_meta}, sort_keys=True,
                        separators=(",", ":")).encode()
    directory, payload, offset = [], [], 0
    for name, arr in entries:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        tag = DTYPE_TAGS.get(np.dtype(dt))
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = arr.astype(DTYPES[tag], copy=False).tobytes()
        nb = name.encode()
        directory.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, arr.ndim)
                         + struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<QQ", offset, len(raw)))
        payload.append(raw)
        offset += len(raw)
    body = (MAGIC + struct.pack("<HI", VERSION, len(header)) + header + struct.pack("<I", len(entries))
            + b"".join(directory) + b"".join(payload))
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: MoEModel, path) -> None:
    atomic_write_bytes(Path(path), checkpoint_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint truncated: need {self.pos + n} bytes, file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < len(MAGIC):
        raise TruncatedError("checkpoint truncated inside the magic")
    if data[: len(MAGIC)] != MAGIC:
        raise MagicError("not a MOEM1 checkpoint (bad magic)")
    r = _Reader(data)
    r.take(len(MAGIC))
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (hlen,) = r.unpack("<I")
    header_raw = r.take(hlen)
    (n,) = r.unpack("<I")
    directory = []
    for _ in range(n):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        tag, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        off, nbytes = r.unpack("<QQ")
        directory.append((name, tag, shape, off, nbytes))
    start = r.pos
    end = start + max((off + nb for _, _, _, off, nb in directory), default=0)
    if end + 4 > len(data):
        raise TruncatedError(f"checkpoint truncated: payload needs {end + 4} bytes, file has {len(data)}")
    if end + 4 < len(data):
        raise CheckpointError("trailing bytes after checkpoint trailer")
    (crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(data[:end]) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    try:
        header = json.loads(header_raw)
    except ValueError as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    tensors = {}
    for name, tag, shape, off, nb in directory:
        if tag not in DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}")
        dt = DTYPES[tag]
        if nb != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"size mismatch for {name}")
        arr = np.frombuffer(data, dtype=dt, count=nb // dt.itemsize, offset=start + off).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return header, tensors


def load_checkpoint(path) -> MoEModel:
    header, tensors = parse_checkpoint(Path(path).read_bytes())
    return build_model(ModelConfig.from_dict(header["config"]), tensors, header.get("quant", {}))


def build_model(config: ModelConfig, tensors: dict[str, np.ndarray], quant_meta: dict) -> MoEModel:
    def weight(name: str, owner_quant: dict | None = None, attr: str | None = None) -> np.ndarray:
        if name in quant_meta:
            meta = quant_meta[name]
            qt = QuantizedTensor(tensors[f"{name}.codes"], tensors[f"{name}.scales"], tensors[f"{name}.zeros"],
                                 meta["bits"], meta["group_size"], tensors.get(f"{name}.channel_scale"))
            owner_quant[attr] = qt
            return qt.dequantize()
        try:
            return tensors[name]
        except KeyError:
            raise CheckpointError(f"checkpoint is missing tensor {name}") from None

    def expert(prefix: str) -> Expert:
        q: dict = {}
        ws = {w: weight(f"{prefix}.{w}", q, w) for w in Expert.WEIGHTS}
        return Expert(**ws, quant=q)

    blocks = []
    origins = config.origins()
    for i in range(config.n_layers):
        p = f"blocks.{i}"
        q: dict = {}
        attn = Attention(**{w: weight(f"{p}.attn.{w}", q, w) for w in Attention.WEIGHTS}, quant=q)
        kind = config.layer_kind(i)
        ffn_norm, ffn = None, None
        if kind == "dense":
            ffn_norm, ffn = weight(f"{p}.ffn_norm"), expert(f"{p}.ffn")
        elif kind == "moe":
            ffn_norm = weight(f"{p}.ffn_norm")
            ffn = MoELayer(
                router=weight(f"{p}.ffn.router"),
                experts=[expert(f"{p}.ffn.experts.{j}") for j in range(config.experts_in_layer(i))],
                shared=[expert(f"{p}.ffn.shared.{j}") for j in range(config.n_shared_experts)],
                origins=tensors.get(f"{p}.ffn.origins"),
                full_router=tensors.get(f"{p}.ffn.full_router"),
                keep_rows=tensors.get(f"{p}.ffn.keep_rows"),
            )
        blocks.append(Block(weight(f"{p}.attn_norm"), attn, ffn_norm, ffn, origins[i]))
    embed = weight("embed")
    return MoEModel(
        config=config,
        embed=embed,
        pos_embed=tensors.get("pos_embed"),
        blocks=blocks,
        final_norm=weight("final_norm"),
        unembed=embed if config.tie_embeddings else weight("unembed"),
    )
