"""Binary model files.

Layout (all integers little-endian)::

    magic      4 bytes   b"DSDM"
    version    u32
    count      u32       number of sections
    total      u64       file length in bytes, trailer included
    table      count entries:
                 name_len u16, name utf-8, dtype u8 (0 = utf-8 JSON, 1 = float64),
                 ndim u8, dims u32 * ndim, offset u64, nbytes u64
    payloads   raw section bytes at their offsets
    crc        u32       CRC-32 of every preceding byte

The ``config`` section holds the model configuration and per-stage shrinkage
descriptions as sorted-key JSON.  Every other section is a float64 array
named by its parameter path (``stages.0.F``, ``stages.0.shrink_v.a1``, ...).
See ``docs/model_format.md``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .admm import Model, ModelConfig, StageParams
from .linop import FilterBank
from .shrinkage import shrinkage_from_config

MAGIC = b"DSDM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_ENTRY_TAIL = struct.Struct("<QQ")
_DTYPE_JSON, _DTYPE_F64 = 0, 1

ERROR_KINDS = ("format", "version", "truncated", "checksum", "non-finite parameter")


class ModelFormatError(ValueError):
    """Rejected model file; ``kind`` is one of :data:`ERROR_KINDS`."""

    def __init__(self, kind: str, message: str, path: str | None = None):
        if kind not in ERROR_KINDS:
            raise ValueError(f"unknown error kind {kind!r}")
        self.kind = kind
        self.path = path
        super().__init__(f"{kind}: {message}")


def _encode_entry(name: str, dtype: int, shape: tuple, offset: int, nbytes: int) -> bytes:
    raw = name.encode("utf-8")
    return (struct.pack("<H", len(raw)) + raw + struct.pack("<BB", dtype, len(shape))
            + struct.pack(f"<{len(shape)}I", *shape) + _ENTRY_TAIL.pack(offset, nbytes))


def pack_sections(config: dict, arrays: dict[str, np.ndarray], version: int = FORMAT_VERSION) -> bytes:
    """Serialise a config dict and named arrays; no validation of the values."""
    blobs = [("config", _DTYPE_JSON, (), json.dumps(config, sort_keys=True).encode("utf-8"))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8", order="C")
        blobs.append((name, _DTYPE_F64, a.shape, a.tobytes()))
    table_len = sum(len(_encode_entry(n, d, s, 0, 0)) for n, d, s, _ in blobs)
    offset = _HEADER.size + table_len
    table, payload = b"", b""
    for name, dtype, shape, data in blobs:
        table += _encode_entry(name, dtype, shape, offset, len(data))
        payload += data
        offset += len(data)
    total = offset + 4
    body = _HEADER.pack(MAGIC, version, len(blobs), total) + table + payload
    return body + struct.pack("<I", zlib.crc32(body))


def unpack_sections(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Inverse of :func:`pack_sections`; raises :class:`ModelFormatError`."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise ModelFormatError("format", "bad magic bytes")
    if len(data) < _HEADER.size + 4:
        raise ModelFormatError("truncated", f"only {len(data)} bytes")
    _, version, count, total = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise ModelFormatError("version", f"file version {version}, reader supports {FORMAT_VERSION}")
    if len(data) < total:
        raise ModelFormatError("truncated", f"expected {total} bytes, found {len(data)}")
    if len(data) > total:
        raise ModelFormatError("format", f"{len(data) - total} trailing bytes")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ModelFormatError("checksum", "CRC-32 mismatch")
    pos, sections = _HEADER.size, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            dtype, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            offset, nbytes = _ENTRY_TAIL.unpack_from(body, pos)
            pos += _ENTRY_TAIL.size
            if offset + nbytes > len(body):
                raise ModelFormatError("format", f"section {name!r} overruns the payload")
            raw = body[offset:offset + nbytes]
            if dtype == _DTYPE_JSON:
                sections[name] = json.loads(raw.decode("utf-8"))
            elif dtype == _DTYPE_F64:
                if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
                    raise ModelFormatError("format", f"section {name!r} size does not match its shape")
                sections[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
            else:
                raise ModelFormatError("format", f"section {name!r} has unknown dtype {dtype}")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ModelFormatError("format", f"corrupt section table: {err}") from err
    if "config" not in sections:
        raise ModelFormatError("format", "missing config section")
    config = sections.pop("config")
    for name, a in sections.items():
        if not np.all(np.isfinite(a)):
            raise ModelFormatError("non-finite parameter", f"{name} contains NaN or Inf")
    return config, sections


def model_to_bytes(model: Model) -> bytes:
    config = {
        "model": model.config.to_dict(),
        "stages": [
            {"shrink_v": st.shrink_v.config(),
             "shrink_z": None if st.shrink_z is None else st.shrink_z.config()}
            for st in model.stages
        ],
    }
    arrays = model.params()
    for t, st in enumerate(model.stages):
        # analytic stages have no learned arrays beyond banks and rho
        arrays.setdefault(f"stages.{t}.rho_data", st.rho_data)
    return pack_sections(config, arrays)


def model_from_bytes(data: bytes) -> Model:
    config, arrays = unpack_sections(data)
    try:
        cfg = ModelConfig(**config["model"])
        stages = []
        for t, sc in enumerate(config["stages"]):
            pre = f"stages.{t}."
            sub = {k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)}
            sv = shrinkage_from_config(sc["shrink_v"], _strip(sub, "shrink_v."))
            G = sz = None
            if "G" in sub:
                G = FilterBank(sub["G"], t)
                sz = shrinkage_from_config(sc["shrink_z"], _strip(sub, "shrink_z."))
            stages.append(StageParams(FilterBank(sub["F"], t), G, sv, sz, sub["rho_reg"],
                                      sub["rho_data"] if G is not None else np.zeros(0)))
        return Model(cfg, stages)
    except (KeyError, TypeError, ValueError) as err:
        raise ModelFormatError("format", f"inconsistent model description: {err}") from err


def _strip(d: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> Model:
    path = Path(path)
    try:
        return model_from_bytes(path.read_bytes())
    except ModelFormatError as err:
        err.path = str(path)
        raise
