"""Model file format.

Layout: magic "DRSM", u16 LE format version, u32 LE length-prefixed UTF-8
architecture descriptor (canonical text, one layer per line in build order),
then each parameter in descriptor order as [u32 name length | name | u32 rank
| u32 extents... | raw float32 LE payload], and a trailing CRC32 (u32 LE) of
everything after the magic. A file whose descriptor disagrees with the
caller's expectation is refused.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import FormatError, IoError
from .models import (
    BatchNormSpec,
    ConcatSpec,
    ConvSpec,
    DenseSpec,
    DropoutSpec,
    FlattenSpec,
    GlobalAvgPoolSpec,
    MaxPoolSpec,
    ModelGraph,
    expected_param_shapes,
    param_names,
)

MAGIC = b"DRSM"
VERSION = 1


# ---------------------------------------------------------------------------
# architecture descriptor
# ---------------------------------------------------------------------------

def _spec_line(spec) -> str:
    inputs = ",".join(spec.inputs)
    if isinstance(spec, ConvSpec):
        return (
            f"conv2d name={spec.name} in={inputs} k={spec.kh}x{spec.kw} "
            f"cin={spec.cin} cout={spec.cout} stride={spec.stride} "
            f"padding={spec.padding} act={spec.activation}"
        )
    if isinstance(spec, BatchNormSpec):
        return f"batchnorm name={spec.name} in={inputs} channels={spec.channels}"
    if isinstance(spec, MaxPoolSpec):
        return (
            f"maxpool name={spec.name} in={inputs} window={spec.window} "
            f"stride={spec.stride} padding={spec.padding}"
        )
    if isinstance(spec, GlobalAvgPoolSpec):
        return f"globalavgpool name={spec.name} in={inputs}"
    if isinstance(spec, FlattenSpec):
        return f"flatten name={spec.name} in={inputs}"
    if isinstance(spec, DenseSpec):
        return (
            f"dense name={spec.name} in={inputs} din={spec.din} dout={spec.dout} "
            f"act={spec.activation}"
        )
    if isinstance(spec, DropoutSpec):
        return f"dropout name={spec.name} in={inputs} rate={spec.rate!r}"
    if isinstance(spec, ConcatSpec):
        return f"concat name={spec.name} in={inputs}"
    raise FormatError(f"unknown layer spec {type(spec).__name__}")


def describe(model: ModelGraph) -> str:
    """Canonical architecture text: header, input shape, one line per layer."""
    lines = [f"drsm v{VERSION}", "input " + "x".join(str(v) for v in model.input_shape)]
    lines.extend(_spec_line(spec) for spec in model.specs)
    return "\n".join(lines) + "\n"


def _parse_kv(tokens, line):
    kv = {}
    for token in tokens:
        if "=" not in token:
            raise FormatError(f"malformed descriptor token {token!r} in {line!r}")
        key, value = token.split("=", 1)
        kv[key] = value
    return kv


def parse_descriptor(text: str) -> ModelGraph:
    """Rebuild an (unweighted) ModelGraph from descriptor text."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 3 or lines[0] != f"drsm v{VERSION}":
        raise FormatError("descriptor header missing or wrong version")
    head = lines[1].split()
    if len(head) != 2 or head[0] != "input":
        raise FormatError(f"bad input line {lines[1]!r}")
    try:
        input_shape = tuple(int(v) for v in head[1].split("x"))
    except ValueError as exc:
        raise FormatError(f"bad input extents {head[1]!r}") from exc

    specs = []
    for line in lines[2:]:
        tokens = line.split()
        kind, kv = tokens[0], _parse_kv(tokens[1:], line)
        try:
            name = kv["name"]
            inputs = tuple(kv["in"].split(","))
            if kind == "conv2d":
                kh, kw = (int(v) for v in kv["k"].split("x"))
                specs.append(
                    ConvSpec(name, inputs, kh, kw, int(kv["cin"]), int(kv["cout"]),
                             int(kv["stride"]), kv["padding"], kv["act"])
                )
            elif kind == "batchnorm":
                specs.append(BatchNormSpec(name, inputs, int(kv["channels"])))
            elif kind == "maxpool":
                specs.append(
                    MaxPoolSpec(name, inputs, int(kv["window"]), int(kv["stride"]), kv["padding"])
                )
            elif kind == "globalavgpool":
                specs.append(GlobalAvgPoolSpec(name, inputs))
            elif kind == "flatten":
                specs.append(FlattenSpec(name, inputs))
            elif kind == "dense":
                specs.append(DenseSpec(name, inputs, int(kv["din"]), int(kv["dout"]), kv["act"]))
            elif kind == "dropout":
                specs.append(DropoutSpec(name, inputs, float(kv["rate"])))
            elif kind == "concat":
                specs.append(ConcatSpec(name, inputs))
            else:
                raise FormatError(f"unknown layer kind {kind!r}")
        except (KeyError, ValueError) as exc:
            raise FormatError(f"malformed descriptor line {line!r}: {exc}") from exc
    try:
        return ModelGraph(input_shape, specs)
    except Exception as exc:
        raise FormatError(f"descriptor does not build a valid graph: {exc}") from exc


# ---------------------------------------------------------------------------
# binary encode/decode
# ---------------------------------------------------------------------------

def _encode(model: ModelGraph) -> bytes:
    descriptor = describe(model).encode("utf-8")
    body = bytearray()
    body += struct.pack("<H", VERSION)
    body += struct.pack("<I", len(descriptor)) + descriptor
    for spec in model.specs:
        for name in param_names(spec):
            arr = np.ascontiguousarray(model.weights[name], dtype=np.float32)
            encoded_name = name.encode("utf-8")
            body += struct.pack("<I", len(encoded_name)) + encoded_name
            body += struct.pack("<I", arr.ndim)
            body += struct.pack(f"<{arr.ndim}I", *arr.shape)
            body += arr.tobytes(order="C")
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    return MAGIC + bytes(body)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated model file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _decode(blob: bytes) -> ModelGraph:
    if blob[:4] != MAGIC:
        raise FormatError("bad magic; not a model file")
    body = blob[4:]
    if len(body) < 4:
        raise FormatError("truncated model file")
    payload, (stored_crc,) = body[:-4], struct.unpack("<I", body[-4:])
    if zlib.crc32(payload) != stored_crc:
        raise FormatError("checksum mismatch; file is corrupt")

    r = _Reader(payload)
    version = r.u16()
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    descriptor = r.take(r.u32()).decode("utf-8", errors="strict")
    model = parse_descriptor(descriptor)

    expected = expected_param_shapes(model)
    weights = {}
    for spec in model.specs:
        for name in param_names(spec):
            stored_name = r.take(r.u32()).decode("utf-8")
            if stored_name != name:
                raise FormatError(f"parameter order mismatch: {stored_name!r} vs {name!r}")
            rank = r.u32()
            if rank < 1 or rank > 4:
                raise FormatError(f"parameter {name!r} has invalid rank {rank}")
            shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank)))
            if shape != expected[name]:
                raise FormatError(f"parameter {name!r} shape {shape} != expected {expected[name]}")
            count = int(np.prod(shape))
            data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
            weights[name] = np.ascontiguousarray(data, dtype=np.float32)
    if r.pos != len(payload):
        raise FormatError("trailing bytes after last parameter")
    model.weights = weights
    model._check_weights()
    return model


def save_model(model: ModelGraph, path) -> None:
    blob = _encode(model)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoError(path, str(exc)) from exc


def load_model(path, expected_descriptor: str | None = None) -> ModelGraph:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(path, str(exc)) from exc
    model = _decode(blob)
    if expected_descriptor is not None and describe(model) != expected_descriptor:
        raise FormatError("architecture descriptor does not match expectation")
    return model
