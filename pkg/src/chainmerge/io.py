"""On-disk formats: model checkpoints, sample matrices and JSON reports.

A checkpoint is a directory holding ``manifest.json`` and ``weights.bin``.
The blob stores each layer's weight row-major as little-endian float32,
layers back to back in manifest order, each padded with zero bytes to an
8-byte boundary.

A matrix file (``*.cmmx``) is a 24-byte header (magic ``CMMX``, u32
version, u64 rows, u64 cols, all little-endian) followed by the row-major
little-endian float32 payload.
"""
from __future__ import annotations

import json
from pathlib import Path
import struct

import numpy as np

from .errors import CorruptCheckpoint, InvalidModel, NotAMatrixFile, UnsupportedVersion
from .model import ActivationKind, LinearLayer, SequentialModel

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"
ALIGN = 8

MATRIX_MAGIC = b"CMMX"
MATRIX_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


def _padded(nbytes: int) -> int:
    return -(-nbytes // ALIGN) * ALIGN


def dumps_json(obj) -> str:
    """Stable JSON text: insertion-ordered keys, shortest round-trip floats."""
    return json.dumps(obj, indent=2, ensure_ascii=False, allow_nan=True) + "\n"


def write_json(obj, path) -> None:
    Path(path).write_text(dumps_json(obj), encoding="utf-8")


def save_checkpoint(model: SequentialModel, path) -> None:
    path = Path(path)
    for layer in model.layers:
        with np.errstate(over="ignore"):
            finite = np.all(np.isfinite(layer.weight.astype("<f4")))
        if not finite:
            raise InvalidModel(f"layer {layer.name!r} has weights that are not finite in float32")
    path.mkdir(parents=True, exist_ok=True)

    entries = []
    chunks = []
    offset = 0
    for layer in model.layers:
        raw = np.ascontiguousarray(layer.weight, dtype="<f4").tobytes()
        entries.append(
            {
                "name": layer.name,
                "rows": layer.weight.shape[0],
                "cols": layer.weight.shape[1],
                "has_bias": layer.has_bias,
                "activation": layer.activation.value,
                "byte_offset": offset,
            }
        )
        padded = _padded(len(raw))
        chunks.append(raw + b"\x00" * (padded - len(raw)))
        offset += padded

    manifest = {"format_version": FORMAT_VERSION, "input_dim": model.input_dim, "layers": entries}
    (path / BLOB_NAME).write_bytes(b"".join(chunks))
    write_json(manifest, path / MANIFEST_NAME)


def load_checkpoint(path) -> SequentialModel:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CorruptCheckpoint(f"{path} has no {MANIFEST_NAME}") from None
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"unreadable manifest in {path}: {exc}") from None
    if not isinstance(manifest, dict):
        raise CorruptCheckpoint("manifest must be a JSON object")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"checkpoint format version {version!r} is not supported (expected {FORMAT_VERSION})")
    try:
        blob = (path / BLOB_NAME).read_bytes()
    except FileNotFoundError:
        raise CorruptCheckpoint(f"{path} has no {BLOB_NAME}") from None

    try:
        input_dim = int(manifest["input_dim"])
        entries = list(manifest["layers"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"malformed manifest: {exc}") from None

    layers = []
    expected_offset = 0
    for entry in entries:
        try:
            name = str(entry["name"])
            rows, cols = int(entry["rows"]), int(entry["cols"])
            has_bias = bool(entry["has_bias"])
            tag = entry["activation"]
            offset = int(entry["byte_offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptCheckpoint(f"malformed layer entry: {exc}") from None
        activation = ActivationKind.parse(tag)
        if rows < 1 or cols < 1:
            raise InvalidModel(f"layer {name!r} has degenerate shape {rows}x{cols}")
        if offset != expected_offset or offset % ALIGN:
            raise CorruptCheckpoint(f"layer {name!r} byte_offset {offset} breaks the packed 8-byte layout")
        nbytes = rows * cols * 4
        if offset + nbytes > len(blob):
            raise CorruptCheckpoint(f"weights blob truncated inside layer {name!r}")
        w = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols)
        if not np.all(np.isfinite(w)):
            raise InvalidModel(f"layer {name!r} has non-finite weights")
        layers.append(LinearLayer(name, w.astype(np.float64), has_bias, activation))
        expected_offset = offset + _padded(nbytes)
    if len(blob) != expected_offset:
        raise CorruptCheckpoint(f"weights blob has {len(blob)} bytes, manifest describes {expected_offset}")
    return SequentialModel(tuple(layers), input_dim)


def save_matrix(x, path) -> None:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {x.shape}")
    rows, cols = x.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def load_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:4] != MATRIX_MAGIC:
        raise NotAMatrixFile(f"{path} is not a CMMX matrix file")
    _, version, rows, cols = _HEADER.unpack_from(data)
    if version != MATRIX_VERSION:
        raise UnsupportedVersion(f"matrix format version {version} is not supported")
    payload = data[_HEADER.size :]
    if len(payload) != rows * cols * 4:
        raise NotAMatrixFile(f"{path}: payload has {len(payload)} bytes, header implies {rows * cols * 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
