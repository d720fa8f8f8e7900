"""Bit-exact file formats: a minimal tensor container and the quantized
model layout.

The container is a u64 little-endian header length, a UTF-8 JSON header
mapping tensor names to {dtype, shape, data_offsets}, then a raw data
section. Only F32/F64 are accepted. The writer is canonical — sorted
names, compact JSON, itemsize-aligned offsets — so equal inputs always
produce identical bytes.

The quantized format stores, per layer, a float32 codebook followed by
bit-packed assignments, plus raw passthrough tensors (biases, norms,
embeddings) and a config echo. Layout: magic u32, version u32, u64
header length, UTF-8 JSON header, payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .vq import LayerShape, PackedAssignments, pack, unpack

MAGIC = 0x56513444
VERSION = 1

_DTYPES = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "F32", np.dtype(np.float64): "F64"}


class ModelIOError(Exception):
    """Base class for every parse/serialize failure in this module."""


class TruncatedError(ModelIOError):
    """File shorter than its own header claims."""


class HeaderError(ModelIOError):
    """Header text is not valid UTF-8 JSON of the expected structure."""


class RangeError(ModelIOError):
    """Tensor byte ranges overlap, escape the data section, or are
    misaligned/mis-sized for their dtype."""


class DtypeError(ModelIOError):
    """Tensor dtype outside the supported {F32, F64} set."""


class MagicError(ModelIOError):
    """Quantized file does not start with the expected magic number."""


class VersionError(ModelIOError):
    """Quantized file version not supported by this reader."""


class PayloadMismatchError(ModelIOError):
    """Codebook or packed-assignment byte length disagrees with the
    layer geometry."""


# ---------------------------------------------------------------------------
# tensor container
# ---------------------------------------------------------------------------


@dataclass
class TensorContainer:
    tensors: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)


def _json_object(raw: bytes) -> dict:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise HeaderError(f"header is not UTF-8: {e}") from None

    def no_dupes(pairs):
        d = {}
        for key, val in pairs:
            if key in d:
                raise HeaderError(f"duplicate name {key!r} in header")
            d[key] = val
        return d

    try:
        obj = json.loads(text, object_pairs_hook=no_dupes)
    except json.JSONDecodeError as e:
        raise HeaderError(f"header is not valid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise HeaderError("header must be a JSON object")
    return obj


def parse_container(data: bytes) -> TensorContainer:
    """Parse container bytes; every tensor is returned as an owned,
    writable array."""
    if len(data) < 8:
        raise TruncatedError(f"file is {len(data)} bytes, need at least 8")
    (header_len,) = struct.unpack_from("<Q", data, 0)
    if 8 + header_len > len(data):
        raise TruncatedError(
            f"header claims {header_len} bytes but only {len(data) - 8} follow"
        )
    obj = _json_object(data[8 : 8 + header_len])
    payload = data[8 + header_len :]

    metadata: dict[str, str] = {}
    if "__metadata__" in obj:
        meta = obj.pop("__metadata__")
        if not isinstance(meta, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in meta.items()
        ):
            raise HeaderError("__metadata__ must map strings to strings")
        metadata = dict(meta)

    tensors: dict[str, np.ndarray] = {}
    ranges: list[tuple[int, int, str]] = []
    for name, entry in obj.items():
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise HeaderError(f"tensor {name!r}: expected dtype/shape/data_offsets")
        dtype_name = entry["dtype"]
        if dtype_name not in _DTYPES:
            raise DtypeError(f"tensor {name!r}: unsupported dtype {dtype_name!r}")
        dt = _DTYPES[dtype_name]
        shape = entry["shape"]
        if not isinstance(shape, list) or not all(
            isinstance(s, int) and s >= 0 for s in shape
        ):
            raise HeaderError(f"tensor {name!r}: bad shape {shape!r}")
        offs = entry["data_offsets"]
        if (
            not isinstance(offs, list)
            or len(offs) != 2
            or not all(isinstance(v, int) for v in offs)
        ):
            raise HeaderError(f"tensor {name!r}: bad data_offsets {offs!r}")
        begin, end = offs
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if begin < 0 or end > len(payload) or begin > end:
            raise RangeError(f"tensor {name!r}: range [{begin},{end}) out of bounds")
        if end - begin != nbytes:
            raise RangeError(
                f"tensor {name!r}: range holds {end - begin} bytes, shape needs {nbytes}"
            )
        if begin % dt.itemsize != 0:
            raise RangeError(f"tensor {name!r}: offset {begin} not {dt.itemsize}-aligned")
        ranges.append((begin, end, name))
        arr = np.frombuffer(payload[begin:end], dtype=dt).reshape(shape)
        tensors[name] = arr.astype(arr.dtype, copy=True)

    ranges.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(ranges, ranges[1:]):
        if b1 < e0 and b1 != e1:  # zero-length ranges may sit anywhere
            raise RangeError(f"tensors {n0!r} and {n1!r} overlap")
    return TensorContainer(tensors=tensors, metadata=metadata)


def write_container(
    tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None
) -> bytes:
    """Serialize tensors canonically: sorted names, compact JSON header
    padded to 8 bytes, data section aligned per dtype."""
    entries: dict[str, dict] = {}
    blobs: list[tuple[int, bytes]] = []
    cursor = 0
    for name in sorted(tensors):
        if not isinstance(name, str) or not name or name == "__metadata__":
            raise HeaderError(f"bad tensor name {name!r}")
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _DTYPE_NAMES:
            raise DtypeError(f"tensor {name!r}: cannot store dtype {arr.dtype}")
        item = arr.dtype.itemsize
        pad = (-cursor) % item
        cursor += pad
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries[name] = {
            "dtype": _DTYPE_NAMES[arr.dtype],
            "shape": list(arr.shape),
            "data_offsets": [cursor, cursor + len(raw)],
        }
        blobs.append((pad, raw))
        cursor += len(raw)
    header_obj: dict = dict(entries)
    if metadata:
        if not all(isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()):
            raise HeaderError("metadata must map strings to strings")
        header_obj["__metadata__"] = dict(metadata)
    header = json.dumps(header_obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header += b" " * ((-len(header)) % 8)
    parts = [struct.pack("<Q", len(header)), header]
    for pad, raw in blobs:
        if pad:
            parts.append(b"\x00" * pad)
        parts.append(raw)
    return b"".join(parts)


def read_container_file(path) -> TensorContainer:
    with open(path, "rb") as f:
        return parse_container(f.read())


def write_container_file(path, tensors, metadata=None) -> None:
    data = write_container(tensors, metadata)
    with open(path, "wb") as f:
        f.write(data)


# ---------------------------------------------------------------------------
# quantized model format
# ---------------------------------------------------------------------------


@dataclass
class QuantizedLayer:
    """One finalized layer: geometry, codebook, hard assignments."""

    name: str
    shape: LayerShape
    codebook: np.ndarray  # (k, d) float32
    assignments: np.ndarray  # (S,) int64

    def __post_init__(self):
        k, d = self.codebook.shape
        if (k, d) != (self.shape.k, self.shape.d):
            raise ValueError(
                f"layer {self.name!r}: codebook {k}x{d} does not match shape"
            )
        if self.assignments.shape != (self.shape.num_subvectors,):
            raise ValueError(f"layer {self.name!r}: assignment count mismatch")


@dataclass
class QuantizedModel:
    layers: dict[str, QuantizedLayer]
    passthrough: dict[str, np.ndarray]
    config: dict


def write_quantized(
    layers,
    passthrough: dict[str, np.ndarray],
    config: dict,
) -> bytes:
    """Serialize a quantized model; layers may be a dict or an iterable
    of :class:`QuantizedLayer`. Output is byte-deterministic."""
    if isinstance(layers, dict):
        layer_list = [layers[name] for name in sorted(layers)]
    else:
        layer_list = sorted(layers, key=lambda la: la.name)
    seen: set[str] = set()
    records = []
    payload_parts: list[bytes] = []
    cursor = 0
    for layer in layer_list:
        if layer.name in seen:
            raise HeaderError(f"duplicate layer name {layer.name!r}")
        seen.add(layer.name)
        cb = np.ascontiguousarray(layer.codebook, dtype="<f4").tobytes()
        packed = pack(layer.assignments, layer.shape.k)
        rec = {
            "name": layer.name,
            "o": layer.shape.o,
            "i": layer.shape.i,
            "d": layer.shape.d,
            "k": layer.shape.k,
            "offsets": {
                "codebook": [cursor, cursor + len(cb)],
                "assignments": [
                    cursor + len(cb),
                    cursor + len(cb) + len(packed.payload),
                ],
            },
        }
        records.append(rec)
        payload_parts.append(cb)
        payload_parts.append(packed.payload)
        cursor += len(cb) + len(packed.payload)

    pt_entries: dict[str, dict] = {}
    for name in sorted(passthrough):
        if name in seen:
            raise HeaderError(f"passthrough name {name!r} collides with a layer")
        arr = np.ascontiguousarray(passthrough[name])
        if arr.dtype not in _DTYPE_NAMES:
            raise DtypeError(f"passthrough {name!r}: cannot store dtype {arr.dtype}")
        item = arr.dtype.itemsize
        gap = (-cursor) % item
        if gap:
            payload_parts.append(b"\x00" * gap)
            cursor += gap
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        pt_entries[name] = {
            "dtype": _DTYPE_NAMES[arr.dtype],
            "shape": list(arr.shape),
            "data_offsets": [cursor, cursor + len(raw)],
        }
        payload_parts.append(raw)
        cursor += len(raw)

    header_obj = {"layers": records, "passthrough": pt_entries, "config": config}
    header = json.dumps(header_obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header += b" " * ((-len(header)) % 8)
    return b"".join(
        [struct.pack("<II", MAGIC, VERSION), struct.pack("<Q", len(header)), header]
        + payload_parts
    )


def read_quantized(data: bytes) -> QuantizedModel:
    """Exact inverse of :func:`write_quantized`."""
    if len(data) < 16:
        raise TruncatedError(f"file is {len(data)} bytes, need at least 16")
    magic, version = struct.unpack_from("<II", data, 0)
    if magic != MAGIC:
        raise MagicError(f"bad magic 0x{magic:08X}, expected 0x{MAGIC:08X}")
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    (header_len,) = struct.unpack_from("<Q", data, 8)
    if 16 + header_len > len(data):
        raise TruncatedError(
            f"header claims {header_len} bytes but only {len(data) - 16} follow"
        )
    obj = _json_object(data[16 : 16 + header_len])
    payload = data[16 + header_len :]
    if set(obj) != {"layers", "passthrough", "config"}:
        raise HeaderError("header must contain layers/passthrough/config")
    if not isinstance(obj["layers"], list) or not isinstance(obj["passthrough"], dict):
        raise HeaderError("bad layers/passthrough structure")

    layers: dict[str, QuantizedLayer] = {}
    for rec in obj["layers"]:
        if not isinstance(rec, dict) or not {"name", "o", "i", "d", "k", "offsets"} <= set(rec):
            raise HeaderError(f"bad layer record {rec!r}")
        try:
            shape = LayerShape(o=rec["o"], i=rec["i"], d=rec["d"], k=rec["k"])
        except (ValueError, TypeError) as e:
            raise HeaderError(f"layer {rec.get('name')!r}: {e}") from None
        name = rec["name"]
        if not isinstance(name, str) or name in layers:
            raise HeaderError(f"bad or duplicate layer name {name!r}")
        offs = rec["offsets"]
        cb_b, cb_e = offs["codebook"]
        as_b, as_e = offs["assignments"]
        if not (0 <= cb_b <= cb_e <= len(payload) and 0 <= as_b <= as_e <= len(payload)):
            raise RangeError(f"layer {name!r}: payload range out of bounds")
        if cb_e - cb_b != shape.k * shape.d * 4:
            raise PayloadMismatchError(
                f"layer {name!r}: codebook is {cb_e - cb_b} bytes, "
                f"geometry needs {shape.k * shape.d * 4}"
            )
        want_assign = (shape.num_subvectors * shape.index_bits + 7) // 8
        if as_e - as_b != want_assign:
            raise PayloadMismatchError(
                f"layer {name!r}: assignments are {as_e - as_b} bytes, "
                f"geometry needs {want_assign}"
            )
        codebook = (
            np.frombuffer(payload[cb_b:cb_e], dtype="<f4")
            .reshape(shape.k, shape.d)
            .copy()
        )
        packed = PackedAssignments(
            payload=payload[as_b:as_e],
            bits_per_index=shape.index_bits,
            count=shape.num_subvectors,
        )
        assignments = unpack(packed, shape.num_subvectors, shape.k)
        layers[name] = QuantizedLayer(
            name=name, shape=shape, codebook=codebook, assignments=assignments
        )

    passthrough: dict[str, np.ndarray] = {}
    for name, entry in obj["passthrough"].items():
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise HeaderError(f"passthrough {name!r}: bad entry")
        if entry["dtype"] not in _DTYPES:
            raise DtypeError(f"passthrough {name!r}: unsupported dtype")
        dt = _DTYPES[entry["dtype"]]
        begin, end = entry["data_offsets"]
        nbytes = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
        if begin < 0 or end > len(payload) or end - begin != nbytes:
            raise RangeError(f"passthrough {name!r}: bad range [{begin},{end})")
        passthrough[name] = (
            np.frombuffer(payload[begin:end], dtype=dt).reshape(entry["shape"]).copy()
        )

    config = obj["config"]
    if not isinstance(config, dict):
        raise HeaderError("config echo must be a JSON object")
    return QuantizedModel(layers=layers, passthrough=passthrough, config=config)


def read_quantized_file(path) -> QuantizedModel:
    with open(path, "rb") as f:
        return read_quantized(f.read())


def write_quantized_file(path, layers, passthrough, config) -> None:
    data = write_quantized(layers, passthrough, config)
    with open(path, "wb") as f:
        f.write(data)
