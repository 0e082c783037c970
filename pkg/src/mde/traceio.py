"""MDET container: bit-exact serialization of models, activation traces, and datasets.

Layout (all integers little-endian):

    bytes 0..4    magic "MDET"
    bytes 4..8    version (u32) = 1
    bytes 8..16   header_len (u64)
    then          header: canonical JSON, UTF-8, header_len bytes
    then          payload: concatenated raw little-endian tensors

The header is JSON in a canonical form so that two writers producing the same
record produce identical bytes: object keys sorted bytewise, no whitespace,
floats in normalized scientific notation (see canonical_json). Entries carry
(name, role, layer_index, dtype, shape, byte_offset, byte_len) with offsets
relative to the payload start, packed ascending without gaps. Tensors are
stored as f32 or i32 on disk and widened to f64 / i64 in memory.

docs/format.md documents the byte layout with a hex-annotated example.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .batchnorm import BatchStats, BnLayerState

__all__ = [
    "MAGIC",
    "VERSION",
    "ROLES",
    "MdetError",
    "BadMagic",
    "UnsupportedVersion",
    "CorruptHeader",
    "RangeViolation",
    "MdetEntry",
    "MdetTensor",
    "MdetRecord",
    "MdetFile",
    "canonical_json",
    "write_mdet",
    "read_mdet",
    "stats_only_view",
    "trace_layer_inputs",
    "toy_to_record",
    "record_to_toy",
    "bn_states_from_model_file",
    "dataset_to_record",
    "dataset_from_file",
    "trace_to_record",
]

MAGIC = b"MDET"
VERSION = 1
KINDS = ("model", "trace", "dataset")
ROLES = (
    "bn_gamma",
    "bn_beta",
    "bn_running_mean",
    "bn_running_var",
    "weight",
    "bias",
    "activation",
    "image",
    "label",
)
BN_ROLES = ("bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var")
_DTYPES = {"f32": ("<f4", np.float64), "i32": ("<i4", np.int64)}
_DTYPE_SIZE = 4


class MdetError(ValueError):
    """Base for malformed MDET files; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


class BadMagic(MdetError):
    pass


class UnsupportedVersion(MdetError):
    pass


class CorruptHeader(MdetError):
    pass


class RangeViolation(MdetError):
    pass


# ---------------------------------------------------------------------------
# canonical JSON
# ---------------------------------------------------------------------------

_ESCAPES = {'"': '\\"', "\\": "\\\\", "\b": "\\b", "\f": "\\f", "\n": "\\n", "\r": "\\r", "\t": "\\t"}


def _escape(s: str) -> str:
    parts = ['"']
    for ch in s:
        if ch in _ESCAPES:
            parts.append(_ESCAPES[ch])
        elif ord(ch) < 0x20:
            parts.append(f"\\u{ord(ch):04x}")
        else:
            parts.append(ch)
    parts.append('"')
    return "".join(parts)


def _format_float(x: float) -> str:
    """Normalized scientific notation: 17 significant digits, bare integer exponent.

    Zero of either sign prints as "0e0". Both this and the TypeScript
    exporter's Number.toExponential(16) round the same binary64 to the same
    digit string, which is what makes cross-producer files byte-identical.
    """
    if not math.isfinite(x):
        raise ValueError("non-finite number in header")
    if x == 0.0:
        return "0e0"
    mant, exp = f"{x:.16e}".split("e")
    return f"{mant}e{int(exp)}"


def _emit(value, out: list):
    if value is None:
        out.append("null")
    elif value is True:
        out.append("true")
    elif value is False:
        out.append("false")
    elif isinstance(value, str):
        out.append(_escape(value))
    elif isinstance(value, (int, np.integer)):
        out.append(str(int(value)))
    elif isinstance(value, (float, np.floating)):
        out.append(_format_float(float(value)))
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _emit(item, out)
        out.append("]")
    elif isinstance(value, dict):
        out.append("{")
        for i, key in enumerate(sorted(value)):
            if not isinstance(key, str):
                raise TypeError(f"header keys must be strings, got {key!r}")
            if i:
                out.append(",")
            out.append(_escape(key))
            out.append(":")
            _emit(value[key], out)
        out.append("}")
    else:
        raise TypeError(f"cannot serialize {type(value).__name__} in header")


def canonical_json(value) -> str:
    """Deterministic JSON: sorted keys, no whitespace, normalized float notation."""
    out: list = []
    _emit(value, out)
    return "".join(out)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MdetEntry:
    name: str
    role: str
    layer_index: int
    dtype: str
    shape: tuple[int, ...]
    byte_offset: int
    byte_len: int


@dataclass
class MdetTensor:
    """A named tensor staged for writing; the array is cast to `dtype` on disk."""

    name: str
    role: str
    layer_index: int
    array: np.ndarray
    dtype: str = "f32"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        self.array = np.asarray(self.array)
        if self.dtype == "f32" and not np.isfinite(self.array).all():
            raise ValueError(f"tensor {self.name!r} contains NaN or Inf")


@dataclass
class MdetRecord:
    kind: str
    tensors: list[MdetTensor]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown record kind {self.kind!r}")


def _validate_bn_completeness(per_layer: dict[int, dict[str, tuple[int, ...]]], err):
    for layer, roles in sorted(per_layer.items()):
        missing = [r for r in BN_ROLES if r not in roles]
        if missing:
            raise err(f"BN layer {layer} is missing roles {missing}")
        if len(roles) != len(BN_ROLES):
            raise err(f"BN layer {layer} has unexpected duplicate roles")
        shapes = {roles[r] for r in BN_ROLES}
        if len(shapes) != 1 or any(len(s) != 1 for s in shapes):
            raise err(f"BN layer {layer} roles disagree on channel count: {sorted(shapes)}")


def write_mdet(record: MdetRecord, path) -> None:
    """Write a record; rewriting the same record yields byte-identical files."""
    seen_bn: dict[int, dict[str, tuple[int, ...]]] = {}
    entries = []
    chunks = []
    offset = 0
    for t in record.tensors:
        disk_dtype, _ = _DTYPES[t.dtype]
        raw = np.ascontiguousarray(t.array, dtype=disk_dtype).tobytes()
        shape = tuple(int(d) for d in t.array.shape)
        entries.append(
            {
                "byte_len": len(raw),
                "byte_offset": offset,
                "dtype": t.dtype,
                "layer_index": int(t.layer_index),
                "name": t.name,
                "role": t.role,
                "shape": list(shape),
            }
        )
        if t.role in BN_ROLES:
            seen_bn.setdefault(int(t.layer_index), {})[t.role] = shape
        chunks.append(raw)
        offset += len(raw)
    if record.kind == "model":
        _validate_bn_completeness(seen_bn, ValueError)
    header = canonical_json({"entries": entries, "kind": record.kind, "metadata": record.metadata}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


@dataclass
class MdetFile:
    """A validated MDET file; tensor payloads load lazily, one entry at a time."""

    path: str
    kind: str
    entries: tuple[MdetEntry, ...]
    metadata: dict
    payload_start: int
    payload_len: int

    def entry(self, name: str) -> MdetEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(f"no entry named {name!r}")

    def load(self, entry: MdetEntry) -> np.ndarray:
        disk_dtype, mem_dtype = _DTYPES[entry.dtype]
        with open(self.path, "rb") as fh:
            fh.seek(self.payload_start + entry.byte_offset)
            raw = fh.read(entry.byte_len)
        if len(raw) != entry.byte_len:
            raise RangeViolation(
                f"entry {entry.name!r} extends past end of file", self.payload_start + entry.byte_offset
            )
        return np.frombuffer(raw, dtype=disk_dtype).reshape(entry.shape).astype(mem_dtype)

    def load_by_name(self, name: str) -> np.ndarray:
        return self.load(self.entry(name))

    def to_record(self) -> MdetRecord:
        tensors = [
            MdetTensor(name=e.name, role=e.role, layer_index=e.layer_index, array=self.load(e), dtype=e.dtype)
            for e in self.entries
        ]
        return MdetRecord(kind=self.kind, tensors=tensors, metadata=dict(self.metadata))


def _header_int(obj: dict, key: str, where: str) -> int:
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        raise CorruptHeader(f"{where}: field {key!r} must be an integer, got {v!r}", 16)
    return v


def read_mdet(path) -> MdetFile:
    """Parse and validate an MDET file; payload bytes are not loaded yet.

    Raises BadMagic, UnsupportedVersion, CorruptHeader, or RangeViolation,
    each reporting the byte offset of the problem.
    """
    import json

    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 4 or head[:4] != MAGIC:
            raise BadMagic(f"not an MDET file: leading bytes {head[:4]!r}", 0)
        if len(head) < 16:
            raise CorruptHeader("file too short for the fixed 16-byte prologue", 4)
        (version,) = struct.unpack("<I", head[4:8])
        if version != VERSION:
            raise UnsupportedVersion(f"version {version} not supported (expected {VERSION})", 4)
        (header_len,) = struct.unpack("<Q", head[8:16])
        fh.seek(0, 2)
        file_len = fh.tell()
        if 16 + header_len > file_len:
            raise CorruptHeader(f"declared header length {header_len} exceeds file size {file_len}", 8)
        fh.seek(16)
        header_bytes = fh.read(header_len)

    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeader(f"header is not valid JSON: {exc}", 16) from None
    if not isinstance(header, dict):
        raise CorruptHeader("header must be a JSON object", 16)
    kind = header.get("kind")
    if kind not in KINDS:
        raise CorruptHeader(f"unknown record kind {kind!r}", 16)
    metadata = header.get("metadata", {})
    if not isinstance(metadata, dict):
        raise CorruptHeader("metadata must be a JSON object", 16)
    raw_entries = header.get("entries")
    if not isinstance(raw_entries, list):
        raise CorruptHeader("entries must be a JSON array", 16)

    payload_start = 16 + header_len
    payload_len = file_len - payload_start
    entries = []
    prev_end = 0
    seen_bn: dict[int, dict[str, tuple[int, ...]]] = {}
    for i, raw in enumerate(raw_entries):
        where = f"entry {i}"
        if not isinstance(raw, dict):
            raise CorruptHeader(f"{where} must be a JSON object", 16)
        name = raw.get("name")
        role = raw.get("role")
        dtype = raw.get("dtype")
        if not isinstance(name, str):
            raise CorruptHeader(f"{where}: name must be a string", 16)
        if role not in ROLES:
            raise CorruptHeader(f"{where}: unknown role {role!r}", 16)
        if dtype not in _DTYPES:
            raise CorruptHeader(f"{where}: unknown dtype {dtype!r}", 16)
        layer_index = _header_int(raw, "layer_index", where)
        byte_offset = _header_int(raw, "byte_offset", where)
        byte_len = _header_int(raw, "byte_len", where)
        shape_raw = raw.get("shape")
        if not isinstance(shape_raw, list) or not all(
            isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape_raw
        ):
            raise CorruptHeader(f"{where}: shape must be a list of non-negative integers", 16)
        shape = tuple(shape_raw)
        expected = int(np.prod(shape, dtype=object)) * _DTYPE_SIZE if shape else _DTYPE_SIZE
        if byte_len != expected:
            raise CorruptHeader(f"{where}: byte_len {byte_len} does not match shape {shape}", 16)
        if byte_offset < 0 or byte_offset + byte_len > payload_len:
            raise RangeViolation(
                f"{where}: bytes [{byte_offset}, {byte_offset + byte_len}) exceed payload of {payload_len}",
                payload_start + max(byte_offset, 0),
            )
        if byte_offset < prev_end:
            raise CorruptHeader(f"{where}: offset {byte_offset} overlaps previous entry ending at {prev_end}", 16)
        prev_end = byte_offset + byte_len
        if role in BN_ROLES:
            layer_roles = seen_bn.setdefault(layer_index, {})
            if role in layer_roles:
                raise CorruptHeader(f"{where}: duplicate role {role} for BN layer {layer_index}", 16)
            layer_roles[role] = shape
        entries.append(
            MdetEntry(
                name=name,
                role=role,
                layer_index=layer_index,
                dtype=dtype,
                shape=shape,
                byte_offset=byte_offset,
                byte_len=byte_len,
            )
        )
    if kind == "model":
        _validate_bn_completeness(seen_bn, CorruptHeader)
    return MdetFile(
        path=str(path),
        kind=kind,
        entries=tuple(entries),
        metadata=metadata,
        payload_start=payload_start,
        payload_len=payload_len,
    )


# ---------------------------------------------------------------------------
# trace views
# ---------------------------------------------------------------------------


def _activation_batches(f: MdetFile) -> list[list[MdetEntry]]:
    if f.kind != "trace":
        raise ValueError(f"expected a trace record, got {f.kind!r}")
    acts = [e for e in f.entries if e.role == "activation"]
    if not acts:
        raise ValueError("trace record has no activation entries")
    layers = max(e.layer_index for e in acts) + 1
    if len(acts) % layers:
        raise ValueError(f"{len(acts)} activation entries do not tile {layers} BN layers")
    batches = []
    for start in range(0, len(acts), layers):
        chunk = acts[start : start + layers]
        if [e.layer_index for e in chunk] != list(range(layers)):
            raise ValueError("activation entries must be ordered batch-major with layer_index cycling 0..L-1")
        batches.append(chunk)
    return batches


def trace_layer_inputs(f: MdetFile) -> Iterator[list[np.ndarray]]:
    """Yield per-batch lists of BN-layer input tensors from a trace record."""
    for chunk in _activation_batches(f):
        yield [f.load(e) for e in chunk]


def stats_only_view(f: MdetFile) -> list[list[BatchStats]]:
    """Per-layer, per-batch channel statistics computed one stored entry at a time.

    Result is indexed [layer][batch]; enough for the closed-form drift metrics
    without ever materializing more than one activation tensor.
    """
    batches = _activation_batches(f)
    layers = len(batches[0])
    out: list[list[BatchStats]] = [[] for _ in range(layers)]
    for chunk in batches:
        for l, e in enumerate(chunk):
            a = f.load(e)
            if a.ndim != 4:
                raise ValueError(f"activation entry {e.name!r} is not 4-D")
            out[l].append(BatchStats(mean=a.mean(axis=(0, 2, 3)), var=a.var(axis=(0, 2, 3))))
    return out


# ---------------------------------------------------------------------------
# converters
# ---------------------------------------------------------------------------


def _arch_to_meta(specs) -> list[dict]:
    from . import toynet as tn

    out = []
    for spec in specs:
        if isinstance(spec, tn.Conv2d):
            out.append(
                {
                    "kind": "conv2d",
                    "out_channels": spec.out_channels,
                    "kernel": spec.kernel,
                    "stride": spec.stride,
                    "pad": spec.pad,
                }
            )
        elif isinstance(spec, tn.BatchNorm):
            out.append({"kind": "batchnorm"})
        elif isinstance(spec, tn.Relu):
            out.append({"kind": "relu"})
        elif isinstance(spec, tn.AvgPool):
            out.append({"kind": "avgpool", "kernel": spec.kernel})
        elif isinstance(spec, tn.Flatten):
            out.append({"kind": "flatten"})
        elif isinstance(spec, tn.Linear):
            out.append({"kind": "linear", "out_features": spec.out_features})
        else:
            raise TypeError(f"cannot serialize layer spec {spec!r}")
    return out


def _meta_to_arch(meta: list[dict]):
    from . import toynet as tn

    specs = []
    for m in meta:
        kind = m.get("kind")
        if kind == "conv2d":
            specs.append(tn.Conv2d(m["out_channels"], m["kernel"], m.get("stride", 1), m.get("pad", 0)))
        elif kind == "batchnorm":
            specs.append(tn.BatchNorm())
        elif kind == "relu":
            specs.append(tn.Relu())
        elif kind == "avgpool":
            specs.append(tn.AvgPool(m["kernel"]))
        elif kind == "flatten":
            specs.append(tn.Flatten())
        elif kind == "linear":
            specs.append(tn.Linear(m["out_features"]))
        else:
            raise ValueError(f"unknown architecture layer kind {kind!r}")
    return tuple(specs)


def toy_to_record(model, creator: str = "mde-toynet", dataset_id: str = "") -> MdetRecord:
    """Serialize a toy model: weights per layer plus the four bn_* roles per BN layer."""
    tensors = []
    for i, wd in enumerate(model.weights):
        if wd is None:
            continue
        tensors.append(MdetTensor(name=f"layer{i:02d}/w", role="weight", layer_index=i, array=wd["w"]))
        tensors.append(MdetTensor(name=f"layer{i:02d}/b", role="bias", layer_index=i, array=wd["b"]))
    for j, s in enumerate(model.bn_states):
        tensors.append(MdetTensor(name=f"bn{j}/gamma", role="bn_gamma", layer_index=j, array=s.gamma))
        tensors.append(MdetTensor(name=f"bn{j}/beta", role="bn_beta", layer_index=j, array=s.beta))
        tensors.append(MdetTensor(name=f"bn{j}/running_mean", role="bn_running_mean", layer_index=j, array=s.running_mean))
        tensors.append(MdetTensor(name=f"bn{j}/running_var", role="bn_running_var", layer_index=j, array=s.running_var))
    eps = model.bn_states[0].eps if model.bn_states else 1e-5
    retain = model.bn_states[0].retain_alpha if model.bn_states else 0.9
    metadata = {
        "architecture": _arch_to_meta(model.specs),
        "class_count": model.class_count,
        "class_labels": list(model.class_labels),
        "creator": creator,
        "dataset_id": dataset_id,
        "eps": float(eps),
        "input_shape": list(model.input_shape),
        "model_id": model.model_id,
        "retain_alpha": float(retain),
        "seed": model.rng_seed,
    }
    return MdetRecord(kind="model", tensors=tensors, metadata=metadata)


def record_to_toy(f: MdetFile):
    """Rebuild a runnable toy model from a model record carrying an architecture."""
    from . import toynet as tn

    if f.kind != "model":
        raise ValueError(f"expected a model record, got {f.kind!r}")
    meta = f.metadata
    arch = meta.get("architecture")
    if not isinstance(arch, list):
        raise ValueError("model record has no architecture; only BN statistics are available")
    specs = _meta_to_arch(arch)
    model = tn.build_model(
        specs,
        input_shape=tuple(meta["input_shape"]),
        class_count=int(meta["class_count"]),
        seed=int(meta.get("seed", 0)),
        retain_alpha=float(meta.get("retain_alpha", 0.9)),
        eps=float(meta.get("eps", 1e-5)),
        class_labels=meta.get("class_labels"),
        model_id=str(meta.get("model_id", "model")),
    )
    for i, wd in enumerate(model.weights):
        if wd is None:
            continue
        wd["w"] = f.load_by_name(f"layer{i:02d}/w")
        wd["b"] = f.load_by_name(f"layer{i:02d}/b")
    model.bn_states = bn_states_from_model_file(f)
    return model


def bn_states_from_model_file(f: MdetFile) -> list[BnLayerState]:
    """BN states in layer order from any model record (architecture not required).

    Empty for BN-less models; drift scoring is what rejects those.
    """
    if f.kind != "model":
        raise ValueError(f"expected a model record, got {f.kind!r}")
    by_layer: dict[int, dict[str, np.ndarray]] = {}
    for e in f.entries:
        if e.role in BN_ROLES:
            by_layer.setdefault(e.layer_index, {})[e.role] = f.load(e)
    eps = float(f.metadata.get("eps", 1e-5))
    retain = float(f.metadata.get("retain_alpha", 0.9))
    states = []
    for layer in sorted(by_layer):
        roles = by_layer[layer]
        states.append(
            BnLayerState(
                gamma=roles["bn_gamma"],
                beta=roles["bn_beta"],
                running_mean=roles["bn_running_mean"],
                running_var=np.maximum(roles["bn_running_var"], 0.0),
                retain_alpha=retain,
                eps=eps,
            )
        )
    return states


def dataset_to_record(images, labels, dataset_id: str, creator: str = "mde-shiftlab", seed: int = 0) -> MdetRecord:
    tensors = [
        MdetTensor(name="images", role="image", layer_index=0, array=np.asarray(images)),
        MdetTensor(name="labels", role="label", layer_index=0, array=np.asarray(labels), dtype="i32"),
    ]
    metadata = {"creator": creator, "dataset_id": dataset_id, "seed": seed}
    return MdetRecord(kind="dataset", tensors=tensors, metadata=metadata)


def dataset_from_file(f: MdetFile):
    if f.kind != "dataset":
        raise ValueError(f"expected a dataset record, got {f.kind!r}")
    images = f.load_by_name("images")
    labels = f.load_by_name("labels")
    return images, labels


def trace_to_record(
    batches_of_layer_inputs: Sequence[Sequence[np.ndarray]],
    model_id: str,
    dataset_id: str,
    creator: str = "mde-toynet",
    seed: int = 0,
) -> MdetRecord:
    """Stage captured BN inputs as a trace record: batch-major, layer cycling within."""
    tensors = []
    for t, layer_inputs in enumerate(batches_of_layer_inputs):
        for l, x in enumerate(layer_inputs):
            tensors.append(
                MdetTensor(name=f"batch{t:03d}/bn{l}", role="activation", layer_index=l, array=np.asarray(x))
            )
    if not tensors:
        raise ValueError("no activations to write")
    metadata = {"creator": creator, "dataset_id": dataset_id, "model_id": model_id, "seed": seed}
    return MdetRecord(kind="trace", tensors=tensors, metadata=metadata)
