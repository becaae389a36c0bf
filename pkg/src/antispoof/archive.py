"""The ``.aspf`` model archive and per-tensor symmetric int8 quantization.

Layout (all integers little-endian)::

    b"ASPF" | u32 version | u32 header length | header JSON | payload

The header is canonical JSON (sorted keys, no whitespace) holding the model
spec, a tensor table (name, kind, dtype, shape, offset, nbytes and, for
int8 tensors, scale and zero_point), the payload length and its CRC-32.
Offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .models import Model, ModelSpec, SpecError, build_model

MAGIC = b"ASPF"
VERSION = 1
_PREFIX = struct.Struct("<4sII")
_DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("i1")}
SCHEMES = ("per_tensor_symmetric",)


class ArchiveError(Exception):
    pass


class BadMagicError(ArchiveError):
    pass


class VersionMismatchError(ArchiveError):
    pass


class TruncatedHeaderError(ArchiveError):
    pass


class HeaderError(ArchiveError):
    pass


class TruncatedPayloadError(ArchiveError):
    pass


class LayoutError(ArchiveError):
    """Tensor table inconsistent with itself, the payload, or the model spec."""


class ChecksumError(ArchiveError):
    pass


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not -128 <= self.zero_point <= 127:
            raise ValueError(f"zero_point must be in [-128, 127], got {self.zero_point}")


@dataclass
class ArchivedTensor:
    kind: str  # "param" or "state"
    data: np.ndarray  # float32, or int8 when quant is set
    quant: QuantParams | None = None

    @property
    def dtype(self) -> str:
        return "i8" if self.quant is not None else "f32"

    def dequantized(self) -> np.ndarray:
        if self.quant is None:
            return self.data.astype(np.float32)
        q = self.quant
        return ((self.data.astype(np.float64) - q.zero_point) * q.scale).astype(np.float32)


@dataclass
class ModelArchive:
    spec: ModelSpec | None
    tensors: dict[str, ArchivedTensor] = field(default_factory=dict)
    spec_dict: dict[str, Any] | None = None

    @property
    def quantized(self) -> bool:
        return any(t.quant is not None for t in self.tensors.values())

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values() if t.kind == "param"))

    def to_model(self) -> Model:
        if self.spec is None:
            raise LayoutError("archive carries no model spec")
        model = build_model(self.spec)
        expected = {**{k: v.shape for k, v in model.params.items()}, **{k: v.shape for k, v in model.state.items()}}
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise LayoutError(f"tensor table does not match the spec (missing {missing[:3]}, extra {extra[:3]})")
        for name, shape in expected.items():
            if self.tensors[name].data.shape != shape:
                raise LayoutError(f"{name}: archived shape {self.tensors[name].data.shape} != {shape}")
        model.set_arrays({k: t.dequantized() for k, t in self.tensors.items()})
        return model


def archive_from_model(model: Model) -> ModelArchive:
    tensors = {k: ArchivedTensor("param", v.data.astype(np.float32)) for k, v in model.params.items()}
    tensors.update({k: ArchivedTensor("state", np.asarray(v, dtype=np.float32)) for k, v in model.state.items()})
    return ModelArchive(model.spec, tensors)


def quantize_tensor(x: np.ndarray) -> tuple[np.ndarray, QuantParams]:
    """q = clamp(round(x / scale), -127, 127) with scale = max|x| / 127 (1.0 for all-zero input)."""
    x64 = np.asarray(x, dtype=np.float64)
    peak = float(np.abs(x64).max()) if x64.size else 0.0
    scale = peak / 127.0 if peak > 0 else 1.0
    q = np.clip(np.rint(x64 / scale), -127, 127).astype(np.int8)
    return q, QuantParams(scale, 0)


def is_weight(name: str) -> bool:
    return name.endswith("/kernel") or name.endswith("/weights")


def quantize_model(model: Model, scheme: str = "per_tensor_symmetric") -> ModelArchive:
    """Convert conv kernels and dense weights to int8; biases and norm tensors stay float32."""
    if scheme not in SCHEMES:
        raise ValueError(f"unsupported quantization scheme {scheme!r}")
    archive = archive_from_model(model)
    for name, t in archive.tensors.items():
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"cannot quantize non-finite tensor {name}")
        if t.kind == "param" and is_weight(name):
            q, params = quantize_tensor(t.data)
            archive.tensors[name] = ArchivedTensor("param", q, params)
    return archive


# serialization -----------------------------------------------------------------


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False).encode("ascii")


def archive_bytes(archive: ModelArchive) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, t in archive.tensors.items():
        raw = np.ascontiguousarray(t.data, dtype=_DTYPES[t.dtype]).tobytes()
        entry = {"name": name, "kind": t.kind, "dtype": t.dtype, "shape": list(t.data.shape),
                 "offset": offset, "nbytes": len(raw)}
        if t.quant is not None:
            entry["scale"] = t.quant.scale
            entry["zero_point"] = t.quant.zero_point
        table.append(entry)
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    spec = archive.spec.to_dict() if archive.spec is not None else archive.spec_dict
    header = _canonical({
        "spec": spec,
        "tensors": table,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    })
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + payload


def write_archive(archive: ModelArchive, path: str | Path) -> int:
    data = archive_bytes(archive)
    Path(path).write_bytes(data)
    return len(data)


def save_model(model: Model, path: str | Path) -> int:
    return write_archive(archive_from_model(model), path)


def _int(v, what: str) -> int:
    if type(v) is not int:
        raise HeaderError(f"{what} must be an integer")
    return v


def parse_header(data: bytes) -> tuple[dict, int]:
    """Validate the fixed prefix and decode the JSON header; return it with the payload start."""
    if len(data) < _PREFIX.size:
        if not MAGIC.startswith(data[:4]):
            raise BadMagicError("bad magic")
        raise TruncatedHeaderError("file too short for an archive prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported archive version {version} (expected {VERSION})")
    start = _PREFIX.size + hlen
    if start > len(data):
        raise TruncatedHeaderError(f"header declares {hlen} bytes but the file ends early")
    try:
        header = json.loads(data[_PREFIX.size : start].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
        raise HeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or set(header) != {"spec", "tensors", "payload_bytes", "payload_crc32"}:
        raise HeaderError("header has the wrong set of keys")
    return header, start


def _parse_table(header: dict) -> list[dict]:
    table = header["tensors"]
    if not isinstance(table, list):
        raise HeaderError("tensor table must be a list")
    payload_bytes = _int(header["payload_bytes"], "payload_bytes")
    seen = set()
    spans = []
    for entry in table:
        if not isinstance(entry, dict):
            raise HeaderError("tensor table entries must be objects")
        base = {"name", "kind", "dtype", "shape", "offset", "nbytes"}
        extra = set(entry) - base
        if not base <= set(entry) or extra not in (set(), {"scale", "zero_point"}):
            raise HeaderError(f"tensor entry has unexpected keys: {sorted(entry)}")
        name = entry["name"]
        if not isinstance(name, str) or name in seen:
            raise LayoutError(f"tensor names must be unique strings, got {name!r}")
        seen.add(name)
        if entry["kind"] not in ("param", "state"):
            raise HeaderError(f"{name}: unknown tensor kind {entry['kind']!r}")
        if entry["dtype"] not in _DTYPES:
            raise HeaderError(f"{name}: unknown dtype {entry['dtype']!r}")
        if (entry["dtype"] == "i8") != bool(extra):
            raise LayoutError(f"{name}: quantization parameters must accompany exactly the i8 tensors")
        shape = entry["shape"]
        if not isinstance(shape, list) or not all(type(d) is int and d > 0 for d in shape):
            raise LayoutError(f"{name}: invalid shape {shape!r}")
        offset = _int(entry["offset"], f"{name}: offset")
        nbytes = _int(entry["nbytes"], f"{name}: nbytes")
        if nbytes != math.prod(shape) * _DTYPES[entry["dtype"]].itemsize:
            raise LayoutError(f"{name}: {nbytes} bytes cannot hold shape {shape}")
        if offset < 0 or offset + nbytes > payload_bytes:
            raise LayoutError(f"{name}: span [{offset}, {offset + nbytes}) outside the payload")
        if extra:
            scale, zp = entry["scale"], entry["zero_point"]
            if not isinstance(scale, (int, float)) or isinstance(scale, bool) or type(zp) is not int:
                raise HeaderError(f"{name}: malformed quantization parameters")
            try:
                QuantParams(float(scale), zp)
            except ValueError as exc:
                raise LayoutError(f"{name}: {exc}") from exc
        spans.append((offset, offset + nbytes, name))
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise LayoutError(f"tensors {an} and {bn} overlap")
    return table


def parse_archive(data: bytes) -> ModelArchive:
    try:
        header, start = parse_header(data)
        table = _parse_table(header)
        payload = data[start:]
        expected = header["payload_bytes"]
        if len(payload) < expected:
            raise TruncatedPayloadError(f"payload has {len(payload)} of {expected} bytes")
        if len(payload) > expected:
            raise LayoutError(f"{len(payload) - expected} trailing bytes after the payload")
        if zlib.crc32(payload) != header["payload_crc32"]:
            raise ChecksumError("payload checksum mismatch")
        try:
            spec = ModelSpec.from_dict(header["spec"]) if header["spec"] is not None else None
        except (SpecError, TypeError, ValueError) as exc:
            raise HeaderError(f"invalid model spec: {exc}") from exc
        tensors = {}
        for e in table:
            arr = np.frombuffer(payload, dtype=_DTYPES[e["dtype"]], count=math.prod(e["shape"]), offset=e["offset"])
            arr = arr.reshape(e["shape"]).astype(np.float32 if e["dtype"] == "f32" else np.int8)
            quant = QuantParams(float(e["scale"]), e["zero_point"]) if e["dtype"] == "i8" else None
            tensors[e["name"]] = ArchivedTensor(e["kind"], arr, quant)
        return ModelArchive(spec, tensors, header["spec"])
    except ArchiveError:
        raise
    except Exception as exc:  # any other malformation still surfaces as a named archive error
        raise HeaderError(f"malformed archive: {exc!r}") from exc


def read_archive(path: str | Path) -> ModelArchive:
    return parse_archive(Path(path).read_bytes())


def load_model(path: str | Path) -> Model:
    archive = read_archive(path)
    try:
        return archive.to_model()
    except ArchiveError:
        raise
    except (SpecError, ValueError, KeyError) as exc:
        raise LayoutError(f"archive does not realize its spec: {exc}") from exc


def size_report(float_path: str | Path, quant_path: str | Path) -> dict[str, Any]:
    """Byte sizes, payload sizes, parameter counts and the quantized/float ratio."""
    fdata, qdata = Path(float_path).read_bytes(), Path(quant_path).read_bytes()
    fa, qa = parse_archive(fdata), parse_archive(qdata)
    fh, fstart = parse_header(fdata)
    qh, qstart = parse_header(qdata)
    report = {
        "float_bytes": len(fdata),
        "quant_bytes": len(qdata),
        "float_payload_bytes": len(fdata) - fstart,
        "quant_payload_bytes": len(qdata) - qstart,
        "float_parameters": fa.parameter_count(),
        "quant_parameters": qa.parameter_count(),
        "warnings": [],
    }
    if report["float_payload_bytes"] == 0:
        report["ratio"] = 1.0
        report["warnings"].append("float archive holds no tensors; ratio defaults to 1.0")
    else:
        report["ratio"] = report["quant_bytes"] / report["float_bytes"]
    return report


def format_size_report(report: dict[str, Any]) -> str:
    lines = [
        f"float32 archive : {report['float_bytes']} bytes (payload {report['float_payload_bytes']})",
        f"int8 archive    : {report['quant_bytes']} bytes (payload {report['quant_payload_bytes']})",
        f"parameters      : {report['float_parameters']} / {report['quant_parameters']}",
        f"ratio           : {report['ratio']:.4f}",
    ]
    lines += [f"warning: {w}" for w in report["warnings"]]
    return "\n".join(lines)
