"""Binary model checkpoints.

Layout (little-endian): magic ``MRRN``, u32 format version, u32 byte length
and UTF-8 canonical config text, u32 entry count, then per entry: u32 name
length, name bytes, four u32 shape dims (padded with trailing 1s), raw values
in the model precision.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .arch import Model, build_model
from .textconfig import canonical_text, parse_text

MAGIC = b"MRRN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def model_config_text(model: Model) -> str:
    return canonical_text({
        "model": {"kind": model.kind, "precision": model.precision, "seed": model.seed},
        "arch": model.config.to_dict(),
    })


def _shape4(shape: tuple) -> tuple:
    if len(shape) > 4:
        raise CheckpointError(f"cannot store {len(shape)}-D tensor")
    return tuple(shape) + (1,) * (4 - len(shape))


def encode_checkpoint(model: Model) -> bytes:
    dtype = np.dtype(model.dtype).newbyteorder("<")
    text = model_config_text(model).encode()
    state = model.state_dict()
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(state))]
    for name, arr in state.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<4I", *_shape4(arr.shape)))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(model))
    tmp.replace(path)


def _model_from_text(text: str) -> Model:
    from .config import arch_from_section

    sections = parse_text(text)
    try:
        meta = sections["model"]
        arch = arch_from_section(sections["arch"])
        return build_model(meta["kind"], arch, seed=int(meta["seed"]), precision=meta["precision"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint config missing {exc}") from None


def decode_checkpoint(buf: bytes, path=None) -> Model:
    where = f"{path}: " if path is not None else ""

    def need(offset: int, n: int, what: str) -> None:
        if offset + n > len(buf):
            raise CheckpointError(f"{where}truncated {what} at byte offset {offset}")

    need(0, 4, "magic")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{where}bad magic {bytes(buf[:4])!r} at byte offset 0")
    need(4, 8, "header")
    version, text_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{where}unsupported checkpoint version {version} at byte offset 4")
    need(12, text_len, "config text")
    model = _model_from_text(buf[12:12 + text_len].decode())
    off = 12 + text_len
    need(off, 4, "entry count")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    dtype = np.dtype(model.dtype).newbyteorder("<")
    state = {}
    for _ in range(count):
        need(off, 4, "entry name length")
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, nlen + 16, "entry header")
        name = buf[off:off + nlen].decode()
        off += nlen
        shape = struct.unpack_from("<4I", buf, off)
        off += 16
        nbytes = int(np.prod(shape)) * dtype.itemsize
        need(off, nbytes, f"values of {name!r}")
        state[name] = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=off)
        off += nbytes
    if off != len(buf):
        raise CheckpointError(f"{where}{len(buf) - off} trailing bytes at byte offset {off}")
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise CheckpointError(f"{where}{exc}") from None
    return model


def load_checkpoint(path) -> Model:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), path)

