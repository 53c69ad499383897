"""Checkpoint files.

Layout::

    EMBKIT-CHECKPOINT <version>\\n
    key = value\\n          (EncoderConfig plus metadata, one per line)
    END\\n
    <uint32 record count>
    per record: <uint16 name length><name utf-8><uint8 ndim><uint32 dim>*ndim<float64 LE data>

All integers are little-endian. No timestamps, so identical parameters give
identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..tensor import Tensor
from .model import EncoderConfig, EncoderModel

MAGIC = "EMBKIT-CHECKPOINT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, header: Mapping[str, str], params: Mapping[str, np.ndarray]) -> None:
    lines = [f"{MAGIC} {FORMAT_VERSION}"]
    for key, value in header.items():
        if "\n" in str(value) or "=" in key:
            raise CheckpointError(f"header entry {key!r} is not a single-line key")
        lines.append(f"{key} = {value}")
    lines.append("END")
    chunks = ["\n".join(lines).encode() + b"\n", struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode()
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    end = buf.find(b"\nEND\n")
    if end < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    head = buf[:end].decode().split("\n")
    magic, _, version = head[0].partition(" ")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(version) != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = {}
    for line in head[1:]:
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"{path}: malformed header line {line!r}")
        header[key] = value
    off = end + len(b"\nEND\n")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return header, params


def save_model(path: str | Path, model: EncoderModel, decoder=None, extra: Mapping[str, str] | None = None) -> None:
    header = model.config.to_kv()
    params = dict(model.state_dict())
    if decoder is not None:
        header["decoder_tied"] = str(decoder.tie_lm_head)
        params.update({k: v.data for k, v in decoder.params.items()})
    header.update(extra or {})
    save_checkpoint(path, header, params)


def load_model(path: str | Path, with_decoder: bool = False):
    """Return the encoder, or ``(encoder, decoder_or_None)`` when ``with_decoder``."""
    from .retromae import RetroMaeDecoder

    header, params = load_checkpoint(path)
    config = EncoderConfig.from_kv(header)
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    enc = {k: v for k, v in tensors.items() if not k.startswith("decoder.")}
    model = EncoderModel(config, enc)
    if not with_decoder:
        return model
    dec = {k: v for k, v in tensors.items() if k.startswith("decoder.")}
    decoder = None
    if dec:
        decoder = RetroMaeDecoder(config, tie_lm_head=header.get("decoder_tied") == "True", params=dec)
    return model, decoder
