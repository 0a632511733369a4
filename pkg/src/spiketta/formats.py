"""Binary checkpoint ("SNNW") and dataset cache ("SNND") files.

Checkpoint layout, all integers little-endian::

    b"SNNW" | u32 version | u32 layer count
    per layer:
        u8 kind (0 conv, 1 pool, 2 dense) | u8 flags (bit 0: has bias) | u8 ndim
        u32 dims[ndim]                      weight shape; pool stores (size,)
        f32 weight[prod(dims)]              C order
        f32 bias[dims[0]]                   only if flags & 1
        u32 crc32(weight bytes + bias bytes)
    u32 metadata length | UTF-8 JSON metadata (input shape, spans, alignment layer, extras)

Dataset cache layout::

    b"SNND" | u32 version | u32 count | u32 height | u32 width
    per image: u8 label | u32 pool index | f32 pixels[height * width]
    u32 crc32 of everything after the header
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import snn

CHECKPOINT_MAGIC = b"SNNW"
DATASET_MAGIC = b"SNND"
VERSION = 1
_KIND_CODES = {"conv": 0, "pool": 1, "dense": 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class FormatError(snn.IntegrityError):
    pass


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def encode_checkpoint(params: snn.NetworkParams, metadata: dict | None = None) -> bytes:
    params.validate()
    out = [CHECKPOINT_MAGIC, struct.pack("<II", VERSION, len(params.layers))]
    for layer in params.layers:
        if layer.kind == "pool":
            dims, payload, flags = (layer.size,), b"", 0
        else:
            w = np.ascontiguousarray(layer.weight, dtype="<f4")
            dims = w.shape
            payload = w.tobytes()
            flags = 0
            if layer.bias is not None:
                payload += np.ascontiguousarray(layer.bias, dtype="<f4").tobytes()
                flags = 1
        out.append(struct.pack("<BBB", _KIND_CODES[layer.kind], flags, len(dims)))
        out.append(struct.pack(f"<{len(dims)}I", *dims))
        out.append(payload)
        out.append(struct.pack("<I", zlib.crc32(payload)))
    meta = {
        "input_shape": list(params.input_shape),
        "extractor_span": list(params.extractor_span),
        "classifier_span": list(params.classifier_span),
        "alignment_layer": params.alignment_layer,
        "extra": metadata or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    out.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(out)


def decode_checkpoint(data: bytes) -> tuple[snn.NetworkParams, dict]:
    r = _Reader(data, "checkpoint")
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, n_layers = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    layers = []
    for i in range(n_layers):
        code, flags, ndim = r.unpack("<BBB")
        if code not in _CODE_KINDS:
            raise FormatError(f"layer {i}: unknown kind code {code}")
        dims = r.unpack(f"<{ndim}I")
        kind = _CODE_KINDS[code]
        start = r.pos
        if kind == "pool":
            layer = snn.PoolLayer(dims[0])
        else:
            w = r.floats(int(np.prod(dims))).reshape(dims)
            b = r.floats(dims[0]) if flags & 1 else None
            layer = snn.ConvLayer(w, b) if kind == "conv" else snn.DenseLayer(w, b)
        payload = data[start : r.pos]
        (crc,) = r.unpack("<I")
        if crc != zlib.crc32(payload):
            raise FormatError(f"layer {i}: payload checksum mismatch")
        layers.append(layer)
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint metadata unreadable: {exc}") from exc
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint metadata")
    params = snn.NetworkParams(
        layers,
        tuple(meta["input_shape"]),
        tuple(meta["extractor_span"]),
        tuple(meta["classifier_span"]),
        meta["alignment_layer"],
    )
    return params, meta.get("extra", {})


def save_checkpoint(path, params: snn.NetworkParams, metadata: dict | None = None):
    Path(path).write_bytes(encode_checkpoint(params, metadata))


def load_checkpoint(path) -> tuple[snn.NetworkParams, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def encode_dataset(images: np.ndarray, labels, indices) -> bytes:
    images = np.asarray(images, dtype="<f4")
    n, H, W = images.shape
    body = bytearray()
    for img, lab, idx in zip(images, labels, indices):
        body += struct.pack("<BI", int(lab), int(idx))
        body += np.ascontiguousarray(img).tobytes()
    head = DATASET_MAGIC + struct.pack("<IIII", VERSION, n, H, W)
    return head + bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))


def decode_dataset(data: bytes):
    r = _Reader(data, "dataset cache")
    if r.take(4) != DATASET_MAGIC:
        raise FormatError("not a dataset cache (bad magic)")
    version, n, H, W = r.unpack("<IIII")
    if version != VERSION:
        raise FormatError(f"unsupported dataset cache version {version}")
    start = r.pos
    images = np.empty((n, H, W), np.float32)
    labels = np.empty(n, np.int64)
    indices = np.empty(n, np.int64)
    for k in range(n):
        labels[k], indices[k] = r.unpack("<BI")
        images[k] = r.floats(H * W).reshape(H, W)
    body = data[start : r.pos]
    (crc,) = r.unpack("<I")
    if crc != zlib.crc32(body):
        raise FormatError("dataset cache checksum mismatch")
    if r.pos != len(data):
        raise FormatError("trailing bytes after dataset cache")
    return images, labels, indices
