"""Single-file binary containers for models and datasets.

Layout (little-endian throughout):

    magic (4 bytes) | version u32 | header_len u64 | header JSON (utf-8)
    | header crc32 u32 | payload bytes

The model header carries the graph description, the quantization-parameter
table, the optional lowered-layer table, and a blob directory (name, dtype,
shape, offset into the payload, byte count, crc32). The JSON is canonical
(sorted keys), so identical contents serialize to identical bytes; no
timestamps or environment data are embedded.

Dataset payloads are contiguous sample records: one real32 tensor followed by
one int32 label per sample.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .engine import (
    FixedPointMultiplier,
    LoweredLayer,
    LoweredModel,
    SwishTable,
)
from .layers import Activation, LayerSpec, Model, QuantLayer
from .quant import ACTIVATION, WEIGHT, QuantParams

MODEL_MAGIC = b"AQMC"
DATA_MAGIC = b"AQDS"
FORMAT_VERSION = 1

STAGES = ("float", "qat", "lowered")

_DTYPES = {"<f4": np.float32, "<i1": np.int8, "<i2": np.int16, "<i4": np.int32, "<i8": np.int64}


class ContainerError(ValueError):
    """Malformed, corrupt, or wrong-stage container."""


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_file(path: str, magic: bytes, header: dict, payload: bytes) -> None:
    head = _canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(struct.pack("<I", zlib.crc32(head)))
        fh.write(payload)


def _read_file(path: str, magic: bytes) -> tuple[dict, bytes, int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20 or raw[:4] != magic:
        raise ContainerError(f"{path}: not a {magic.decode()} container")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(
            f"{path}: format version {version} not supported (expected {FORMAT_VERSION})"
        )
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    hstart = 16
    hend = hstart + hlen
    if hend + 4 > len(raw):
        raise ContainerError(f"{path}: truncated header")
    head = raw[hstart:hend]
    (crc,) = struct.unpack_from("<I", raw, hend)
    if zlib.crc32(head) != crc:
        raise ContainerError(f"{path}: header checksum failed at offset {hstart}")
    header = json.loads(head.decode("utf-8"))
    payload_start = hend + 4
    return header, raw[payload_start:], payload_start


def _blob_entry(name: str, arr: np.ndarray, offset: int) -> dict:
    dt = arr.dtype.newbyteorder("<")
    data = np.ascontiguousarray(arr.astype(dt, copy=False)).tobytes()
    return {
        "name": name,
        "dtype": dt.str,
        "shape": list(arr.shape),
        "offset": offset,
        "nbytes": len(data),
        "crc32": zlib.crc32(data),
    }, data


def _pack_blobs(blobs: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    directory = []
    chunks = []
    offset = 0
    for name in sorted(blobs):
        entry, data = _blob_entry(name, blobs[name], offset)
        directory.append(entry)
        chunks.append(data)
        offset += len(data)
    return directory, b"".join(chunks)


def _unpack_blobs(directory: list[dict], payload: bytes, payload_start: int, path: str):
    blobs = {}
    for entry in directory:
        off, n = entry["offset"], entry["nbytes"]
        data = payload[off : off + n]
        if len(data) != n:
            raise ContainerError(f"{path}: blob {entry['name']!r} truncated")
        if zlib.crc32(data) != entry["crc32"]:
            raise ContainerError(
                f"{path}: checksum failed for blob {entry['name']!r} "
                f"at file offset {payload_start + off}"
            )
        if entry["dtype"] not in _DTYPES:
            raise ContainerError(f"{path}: unknown blob dtype {entry['dtype']!r}")
        arr = np.frombuffer(data, dtype=entry["dtype"]).reshape(entry["shape"])
        blobs[entry["name"]] = arr.astype(_DTYPES[entry["dtype"]], copy=True)
    return blobs


# -- model containers ----------------------------------------------------------

@dataclass
class ModelContainer:
    stage: str
    header: dict
    blobs: dict[str, np.ndarray]


def _spec_to_dict(spec: LayerSpec) -> dict:
    return {
        "kind": spec.kind,
        "in_channels": spec.in_channels,
        "out_channels": spec.out_channels,
        "kernel": spec.kernel,
        "stride": spec.stride,
        "padding": spec.padding,
        "pool": spec.pool,
        "activation": spec.activation.kind,
        "alpha": spec.activation.alpha,
    }


def _spec_from_dict(d: dict) -> LayerSpec:
    return LayerSpec(
        kind=d["kind"],
        in_channels=d["in_channels"],
        out_channels=d["out_channels"],
        kernel=d["kernel"],
        stride=d["stride"],
        padding=d["padding"],
        pool=d["pool"],
        activation=Activation(d["activation"], d["alpha"]),
    )


def _params_to_dict(p: QuantParams) -> dict:
    return {"bits": p.bits, "scale": p.scale, "zero_point": p.zero_point, "kind": p.kind}


def _params_from_dict(d: dict) -> QuantParams:
    return QuantParams(d["bits"], d["scale"], d["zero_point"], d["kind"])


def save_model(path: str, model: Model, stage: str, meta: dict | None = None) -> None:
    if stage not in ("float", "qat"):
        raise ContainerError(f"save_model handles float/qat stages, not {stage!r}")
    if stage == "qat" and not model.quantized:
        raise ContainerError("cannot save qat stage: model has no quantization params")
    blobs = {}
    for i, layer in enumerate(model.layers):
        blobs[f"weight{i}"] = layer.weight.data
        blobs[f"bias{i}"] = layer.bias.data
    header = {
        "stage": stage,
        "input_shape": list(model.input_shape),
        "layers": [_spec_to_dict(l.spec) for l in model.layers],
        "meta": meta or {},
    }
    if stage == "qat":
        header["quant"] = {
            "shift_enabled": bool(model.shift_enabled),
            "input": _params_to_dict(model.input_params()),
            "layers": [
                {
                    "weight": _params_to_dict(l.weight_params()),
                    "activation": _params_to_dict(l.act_params()),
                }
                for l in model.layers
            ],
        }
    directory, payload = _pack_blobs(blobs)
    header["blobs"] = directory
    _write_file(path, MODEL_MAGIC, header, payload)


def _mult_to_dict(m: FixedPointMultiplier) -> dict:
    return {"mantissa": m.mantissa, "shift": m.shift}


def _mult_from_dict(d: dict) -> FixedPointMultiplier:
    return FixedPointMultiplier(d["mantissa"], d["shift"])


def save_lowered_model(
    path: str, lm: LoweredModel, report: dict | None = None, meta: dict | None = None
) -> None:
    blobs = {}
    table = []
    for i, layer in enumerate(lm.layers):
        blobs[f"codes{i}"] = layer.weight_codes
        blobs[f"bias{i}"] = layer.folded_bias
        entry = {
            "kind": layer.kind,
            "stride": layer.stride,
            "padding": layer.padding,
            "pool": layer.pool,
            "activation": layer.activation.kind,
            "alpha": layer.activation.alpha,
            "w_bits": layer.w_bits,
            "bits_in": layer.bits_in,
            "bits_out": layer.bits_out,
            "requant": _mult_to_dict(layer.requant),
            "out_zero": layer.out_zero,
            "pad_code": layer.pad_code,
            "alpha_mult": _mult_to_dict(layer.alpha_mult) if layer.alpha_mult else None,
        }
        if layer.swish is not None:
            blobs[f"swish{i}"] = layer.swish.table
            entry["swish"] = {
                "idx_mult": _mult_to_dict(layer.swish.idx_mult),
                "idx_center": layer.swish.idx_center,
            }
        else:
            entry["swish"] = None
        table.append(entry)
    header = {
        "stage": "lowered",
        "input_shape": list(lm.input_shape),
        "lowered": table,
        "input_params": _params_to_dict(lm.in_params),
        "output_params": _params_to_dict(lm.out_params),
        "report": report or {},
        "meta": meta or {},
    }
    directory, payload = _pack_blobs(blobs)
    header["blobs"] = directory
    _write_file(path, MODEL_MAGIC, header, payload)


def load_container(path: str) -> ModelContainer:
    header, payload, payload_start = _read_file(path, MODEL_MAGIC)
    stage = header.get("stage")
    if stage not in STAGES:
        raise ContainerError(f"{path}: unknown stage {stage!r}")
    blobs = _unpack_blobs(header["blobs"], payload, payload_start, path)
    return ModelContainer(stage, header, blobs)


def model_from_container(c: ModelContainer) -> Model:
    """Materialize a float- or qat-stage container."""
    if c.stage not in ("float", "qat"):
        raise ContainerError(f"cannot build a trainable model from stage {c.stage!r}")
    specs = [_spec_from_dict(d) for d in c.header["layers"]]
    layers = []
    for i, spec in enumerate(specs):
        layers.append(QuantLayer(spec, c.blobs[f"weight{i}"], c.blobs[f"bias{i}"]))
    model = Model(layers, tuple(c.header["input_shape"]))
    if c.stage == "qat":
        q = c.header["quant"]
        model.shift_enabled = bool(q["shift_enabled"])
        model.attach_input_quant(_params_from_dict(q["input"]))
        for layer, entry in zip(model.layers, q["layers"]):
            layer.attach_quant(
                _params_from_dict(entry["weight"]), _params_from_dict(entry["activation"])
            )
    return model


def lowered_from_container(c: ModelContainer) -> LoweredModel:
    if c.stage != "lowered":
        raise ContainerError(f"expected lowered stage, got {c.stage!r}")
    layers = []
    for i, entry in enumerate(c.header["lowered"]):
        swish = None
        if entry["swish"] is not None:
            swish = SwishTable(
                _mult_from_dict(entry["swish"]["idx_mult"]),
                entry["swish"]["idx_center"],
                c.blobs[f"swish{i}"],
            )
        layers.append(
            LoweredLayer(
                kind=entry["kind"],
                stride=entry["stride"],
                padding=entry["padding"],
                pool=entry["pool"],
                activation=Activation(entry["activation"], entry["alpha"]),
                weight_codes=c.blobs[f"codes{i}"],
                w_bits=entry["w_bits"],
                folded_bias=c.blobs[f"bias{i}"],
                requant=_mult_from_dict(entry["requant"]),
                out_zero=entry["out_zero"],
                bits_in=entry["bits_in"],
                bits_out=entry["bits_out"],
                pad_code=entry["pad_code"],
                alpha_mult=_mult_from_dict(entry["alpha_mult"]) if entry["alpha_mult"] else None,
                swish=swish,
            )
        )
    return LoweredModel(
        layers,
        _params_from_dict(c.header["input_params"]),
        _params_from_dict(c.header["output_params"]),
        tuple(c.header["input_shape"]),
    )


# -- dataset containers ---------------------------------------------------------

def save_dataset(path: str, images: np.ndarray, labels: np.ndarray, arity: int) -> None:
    images = np.ascontiguousarray(images.astype("<f4", copy=False))
    labels = np.asarray(labels)
    if images.shape[0] != labels.shape[0]:
        raise ContainerError(
            f"sample count {images.shape[0]} != label count {labels.shape[0]}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= arity):
        raise ContainerError(f"labels must lie in [0, {arity})")
    sample_shape = list(images.shape[1:])
    records = bytearray()
    lab32 = labels.astype("<i4")
    for i in range(images.shape[0]):
        records += images[i].tobytes()
        records += lab32[i].tobytes()
    payload = bytes(records)
    header = {
        "count": int(images.shape[0]),
        "sample_shape": sample_shape,
        "label_arity": int(arity),
        "payload_crc32": zlib.crc32(payload),
    }
    _write_file(path, DATA_MAGIC, header, payload)


def load_dataset(path: str) -> tuple[np.ndarray, np.ndarray, int]:
    header, payload, payload_start = _read_file(path, DATA_MAGIC)
    count = header["count"]
    shape = tuple(header["sample_shape"])
    arity = header["label_arity"]
    sample_bytes = int(np.prod(shape)) * 4
    expected = count * (sample_bytes + 4)
    if len(payload) != expected:
        raise ContainerError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise ContainerError(f"{path}: record checksum failed at offset {payload_start}")
    images = np.empty((count, *shape), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    stride = sample_bytes + 4
    for i in range(count):
        start = i * stride
        images[i] = np.frombuffer(payload, "<f4", count=sample_bytes // 4, offset=start).reshape(
            shape
        )
        labels[i] = int(np.frombuffer(payload, "<i4", count=1, offset=start + sample_bytes)[0])
    if labels.size and (labels.min() < 0 or labels.max() >= arity):
        raise ContainerError(f"{path}: labels outside [0, {arity})")
    return images, labels, arity
