"""Binary tensor files, checkpoints, dataset directories and box records.

Tensor file layout (all integers little-endian)::

    b"CAFT" | u16 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank
    | rank x u64 dims | row-major little-endian payload

Checkpoint layout::

    b"CAFC" | u16 version=1 | u32 len | config JSON (sorted keys, utf-8)
    | u32 count | count x (u16 len | name utf-8 | u64 offset | u64 length)
    | concatenated tensor files (offsets relative to the first one)

Detection / ground-truth records are comma-separated text lines::

    image_id,class_id,score,x1,y1,x2,y2     # detection
    image_id,class_id,x1,y1,x2,y2           # ground truth
"""
from __future__ import annotations

import json
import os
import shutil
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tree
from .metrics_eval import DetBox

TENSOR_MAGIC = b"CAFT"
CHECKPOINT_MAGIC = b"CAFC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_MAX_ELEMENTS = 2 ** 62


class FormatError(ValueError):
    """Base class for every persistence error."""


class CorruptMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class DimensionOverflowError(ShapeMismatchError):
    pass


class TruncatedError(FormatError):
    pass


class MalformedLineError(FormatError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Tensors
# ---------------------------------------------------------------------------

def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    native = arr.dtype.newbyteorder("=")
    if native not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    if arr.ndim > 255:
        raise ShapeMismatchError(f"rank {arr.ndim} exceeds 255")
    code = _CODES[native]
    head = TENSOR_MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0, exact: bool = True) -> Tuple[np.ndarray, int]:
    """Parse one tensor at ``offset``; return ``(array, end_offset)``.

    With ``exact`` the tensor must end exactly at the end of ``buf``.
    """
    mv = memoryview(buf)
    if len(mv) - offset < 8:
        if bytes(mv[offset:offset + 4]) != TENSOR_MAGIC[:len(mv) - offset]:
            raise CorruptMagicError("bad tensor magic")
        raise TruncatedError("tensor header truncated")
    if bytes(mv[offset:offset + 4]) != TENSOR_MAGIC:
        raise CorruptMagicError(f"bad tensor magic {bytes(mv[offset:offset + 4])!r}")
    version, code, rank = struct.unpack_from("<HBB", mv, offset + 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"tensor version {version} unsupported (expected {VERSION})")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + 8
    if len(mv) - pos < 8 * rank:
        raise TruncatedError("tensor dims truncated")
    dims = struct.unpack_from(f"<{rank}Q", mv, pos)
    pos += 8 * rank
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise DimensionOverflowError(f"dims {dims} overflow the element count")
    dtype = _DTYPES[code]
    nbytes = count * dtype.itemsize
    if len(mv) - pos < nbytes:
        raise TruncatedError(f"payload truncated: need {nbytes} bytes, have {len(mv) - pos}")
    end = pos + nbytes
    if exact and end != len(mv):
        raise ShapeMismatchError(f"{len(mv) - end} trailing bytes after payload of shape {dims}")
    arr = np.frombuffer(mv[pos:end], dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), end


def write_tensor(path, arr) -> None:
    atomic_write_bytes(path, encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())[0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def encode_checkpoint(tensors: Mapping[str, np.ndarray], config: Mapping) -> bytes:
    names = list(tensors)
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names")
    cfg = json.dumps(dict(config), sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = [encode_tensor(tensors[n]) for n in names]
    out = [CHECKPOINT_MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg, struct.pack("<I", len(names))]
    offset = 0
    for name, blob in zip(names, blobs):
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<QQ", offset, len(blob)))
        offset += len(blob)
    return b"".join(out + blobs)


def decode_checkpoint(buf: bytes) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    mv = memoryview(buf)
    if bytes(mv[:4]) != CHECKPOINT_MAGIC:
        raise CorruptMagicError(f"bad checkpoint magic {bytes(mv[:4])!r}")
    try:
        version, cfg_len = struct.unpack_from("<HI", mv, 4)
        if version != VERSION:
            raise UnsupportedVersionError(f"checkpoint version {version} unsupported")
        pos = 10
        if len(mv) < pos + cfg_len + 4:
            raise TruncatedError("checkpoint config truncated")
        config = json.loads(bytes(mv[pos:pos + cfg_len]).decode("utf-8"))
        pos += cfg_len
        (count,) = struct.unpack_from("<I", mv, pos)
        pos += 4
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", mv, pos)
            pos += 2
            if len(mv) < pos + nlen + 16:
                raise TruncatedError("checkpoint manifest truncated")
            name = bytes(mv[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            off, length = struct.unpack_from("<QQ", mv, pos)
            pos += 16
            entries.append((name, off, length))
    except struct.error as exc:
        raise TruncatedError(f"checkpoint header truncated: {exc}") from None
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    base = pos
    expected = 0
    for name, off, length in entries:
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        if off != expected:
            raise ShapeMismatchError(f"tensor {name!r} at offset {off}, expected {expected}")
        if len(mv) < base + off + length:
            raise TruncatedError(f"tensor {name!r} truncated")
        tensors[name], _ = decode_tensor(mv[base + off:base + off + length])
        expected = off + length
    if base + expected != len(mv):
        raise ShapeMismatchError(f"{len(mv) - base - expected} trailing bytes in checkpoint")
    return config, tensors


def write_checkpoint(path, tensors: Mapping[str, np.ndarray], config: Mapping) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors, config))


def read_checkpoint(path) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    return decode_checkpoint(Path(path).read_bytes())


def params_to_tensors(params) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((name, np.asarray(a)) for name, a in tree.named_arrays(params))


def params_from_tensors(template, tensors: Mapping[str, np.ndarray]):
    """Fill ``template``'s array leaves from ``tensors``; names and shapes must match."""
    want = OrderedDict(tree.named_arrays(template))
    missing = [n for n in want if n not in tensors]
    extra = [n for n in tensors if n not in want]
    if missing or extra:
        raise ShapeMismatchError(f"architecture mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, arr in want.items():
        got = tensors[name]
        if got.shape != np.shape(arr):
            raise ShapeMismatchError(f"{name}: checkpoint shape {got.shape} != model shape {np.shape(arr)}")
    return tree.map_arrays(template, lambda name, a: np.array(tensors[name], dtype=np.asarray(a).dtype))


# ---------------------------------------------------------------------------
# Detection / ground-truth records
# ---------------------------------------------------------------------------

Record = Tuple[str, DetBox]


def format_record(image_id: str, box: DetBox, with_score: bool = True) -> str:
    if not image_id or any(ch in image_id for ch in ",#\n\r") or image_id != image_id.strip():
        raise FormatError(f"invalid image id {image_id!r}")
    coords = (box.x1, box.y1, box.x2, box.y2)
    if not all(np.isfinite(coords)):
        raise FormatError(f"non-finite coordinates {coords}")
    fields = [image_id, str(int(box.class_id))]
    if with_score:
        fields.append(repr(float(box.score)))
    fields += [repr(float(v)) for v in coords]
    return ",".join(fields)


def parse_record(line: str, lineno: int, kind: Optional[str] = None) -> Optional[Record]:
    """Parse one line; comments and blank lines give ``None``."""
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    parts = [p.strip() for p in text.split(",")]
    if kind is None:
        kind = {7: "det", 6: "gt"}.get(len(parts))
    want = {"det": 7, "gt": 6}.get(kind)
    if want is None or len(parts) != want:
        raise MalformedLineError(f"expected 7 (detection) or 6 (ground truth) fields, got {len(parts)}", lineno)
    try:
        image_id, cls = parts[0], int(parts[1])
        nums = [float(p) for p in parts[2:]]
    except ValueError as exc:
        raise MalformedLineError(str(exc), lineno) from None
    if not image_id:
        raise MalformedLineError("empty image id", lineno)
    if not all(np.isfinite(nums)):
        raise MalformedLineError("non-finite number", lineno)
    score = nums.pop(0) if kind == "det" else 1.0
    try:
        box = DetBox(*nums, class_id=cls, score=score)
    except ValueError as exc:
        raise MalformedLineError(str(exc), lineno) from None
    return image_id, box


def serialize_records(records: Sequence[Record], kind: str = "det") -> str:
    header = "# image_id,class_id,score,x1,y1,x2,y2\n" if kind == "det" else "# image_id,class_id,x1,y1,x2,y2\n"
    return header + "".join(format_record(i, b, kind == "det") + "\n" for i, b in records)


def parse_records(text: str, kind: Optional[str] = None) -> List[Record]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        rec = parse_record(line, lineno, kind)
        if rec is not None:
            out.append(rec)
    return out


def write_detections(path, records: Sequence[Record], kind: str = "det") -> None:
    atomic_write_bytes(path, serialize_records(records, kind).encode("utf-8"))


def read_detections(path, kind: Optional[str] = None) -> List[Record]:
    return parse_records(Path(path).read_text(encoding="utf-8"), kind)


def group_by_image(records: Sequence[Record]) -> Dict[str, List[DetBox]]:
    out: Dict[str, List[DetBox]] = {}
    for image_id, box in records:
        out.setdefault(image_id, []).append(box)
    return out


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

def write_dataset(directory, images: Sequence[Tuple[str, np.ndarray]], gts: Sequence[Record],
                  meta: Mapping) -> None:
    """Write ``images/<id>.caft``, ``gts.csv`` and ``manifest.json`` atomically."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=directory.parent, prefix=f".{directory.name}."))
    try:
        (tmp / "images").mkdir()
        entries = []
        for image_id, arr in images:
            rel = f"images/{image_id}.caft"
            (tmp / rel).write_bytes(encode_tensor(arr))
            entries.append({"id": image_id, "file": rel})
        (tmp / "gts.csv").write_text(serialize_records(gts, "gt"), encoding="utf-8")
        manifest = {"version": VERSION, "count": len(entries), "images": entries,
                    "gts": "gts.csv", "meta": dict(meta)}
        (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n",
                                           encoding="utf-8")
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def read_dataset(directory):
    """Return ``(manifest, [(id, image)], {id: [gt boxes]})``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("version") != VERSION:
        raise UnsupportedVersionError(f"dataset manifest version {manifest.get('version')}")
    images = [(e["id"], read_tensor(directory / e["file"])) for e in manifest["images"]]
    if len(images) != manifest["count"]:
        raise ShapeMismatchError(f"manifest count {manifest['count']} != {len(images)} images")
    gts = group_by_image(read_detections(directory / manifest["gts"], "gt"))
    return manifest, images, gts
