"""Checkpoints, metrics logs, mask images and config files.

Checkpoint layout (all integers little-endian)::

    b"MKD1"  u32 version
    repeated until end of file:
        u32 name_len, name (utf-8), u32 rank, u32 dims[rank], u8 dtype (0=f32, 1=f64), payload

The payload is the raw little-endian array in row-major order.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

MAGIC = b"MKD1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}
MAX_RANK = 16


class CheckpointError(ValueError):
    """Malformed checkpoint; carries the byte offset and, when known, the entry name."""

    def __init__(self, message: str, offset: int, entry: str | None = None):
        self.offset = offset
        self.entry = entry
        where = f" in entry {entry!r}" if entry is not None else ""
        super().__init__(f"{message}{where} at byte {offset}")


class MetricsFormatError(ValueError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoints

def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise TypeError(f"checkpoint entry {name!r}: unsupported dtype {arr.dtype}")
        tag = _TAGS[arr.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    """Parse checkpoint bytes; never reads past the buffer."""
    n = len(buf)
    if n < 8:
        raise CheckpointError("file shorter than the 8-byte header", n)
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {bytes(buf[:4])!r}", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    out: dict[str, np.ndarray] = {}
    pos = 8
    index = 0

    def need(count: int, what: str, entry: str):
        if count > n - pos:
            raise CheckpointError(f"truncated {what} (need {count} bytes, {n - pos} left)", pos, entry)

    while pos < n:
        label = f"#{index}"
        need(4, "name length", label)
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(name_len, "name", label)
        try:
            name = bytes(buf[pos:pos + name_len]).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("entry name is not valid utf-8", pos, label) from None
        pos += name_len
        if name in out:
            raise CheckpointError("duplicate entry name", pos - name_len, name)
        need(4, "rank", name)
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if rank > MAX_RANK:
            raise CheckpointError(f"rank {rank} exceeds {MAX_RANK}", pos - 4, name)
        need(4 * rank, "dims", name)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        need(1, "dtype tag", name)
        tag = buf[pos]
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag}", pos, name)
        pos += 1
        dtype = _DTYPES[tag]
        if math.prod(d for d in dims if d) > np.iinfo(np.intp).max:
            raise CheckpointError(f"shape {tuple(dims)} is too large", pos - 1 - 4 * rank, name)
        count = math.prod(dims)
        nbytes = count * dtype.itemsize
        need(nbytes, "payload", name)
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
        out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
        pos += nbytes
        index += 1
    return out


def save_checkpoint(tensors: dict[str, np.ndarray], path) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# metrics

METRIC_COLUMNS = ("iteration", "task", "div", "distill", "lr", "accuracy", "mIoU")


@dataclass
class MetricsLog:
    rows: list[tuple] = field(default_factory=list)

    def append(self, iteration: int, task: float = 0.0, div: float = 0.0, distill: float = 0.0,
               lr: float = 0.0, accuracy: float = float("nan"), mIoU: float = float("nan")) -> None:
        if self.rows and iteration <= self.rows[-1][0]:
            raise ValueError("iterations must increase")
        self.rows.append((int(iteration), float(task), float(div), float(distill), float(lr),
                          float(accuracy), float(mIoU)))

    def column(self, name: str) -> list:
        i = METRIC_COLUMNS.index(name)
        return [r[i] for r in self.rows]

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        if not isinstance(other, MetricsLog) or len(self) != len(other):
            return False
        return all(_same(a, b) for ra, rb in zip(self.rows, other.rows) for a, b in zip(ra, rb))


def _same(a, b) -> bool:
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return a == b


def write_metrics(mlog: MetricsLog, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in mlog.rows:
            w.writerow([str(row[0])] + [repr(v) for v in row[1:]])


def read_metrics(path) -> MetricsLog:
    mlog = MetricsLog()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_COLUMNS:
            raise MetricsFormatError(f"expected header {','.join(METRIC_COLUMNS)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(METRIC_COLUMNS):
                raise MetricsFormatError(f"expected {len(METRIC_COLUMNS)} fields, got {len(row)}", lineno)
            try:
                it = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError as e:
                raise MetricsFormatError(str(e), lineno) from None
            try:
                mlog.append(it, *vals)
            except ValueError as e:
                raise MetricsFormatError(str(e), lineno) from None
    return mlog


# ---------------------------------------------------------------------------
# mask images

def mask_to_bytes(mask: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 0..255 with round-half-up."""
    m = np.asarray(mask, dtype=np.float64)
    if m.size and (np.nanmin(m) < 0.0 or np.nanmax(m) > 1.0 or np.isnan(m).any()):
        raise ValueError("mask values must lie in [0, 1]")
    return np.floor(255.0 * m + 0.5).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    H, W = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    W, H = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=W * H).reshape(H, W)


def export_mask_images(masks, H: int, W: int, out_dir, stage: str = "0") -> list[Path]:
    """One P5 image per mask row, named ``mask_{stage}_{token}.pgm``."""
    M = masks.M.data if hasattr(masks, "M") else np.asarray(masks)
    if M.ndim != 2 or M.shape[1] != H * W:
        raise ValueError(f"expected masks of shape (T, {H * W}), got {M.shape}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, row in enumerate(M):
        p = out_dir / f"mask_{stage}_{i}.pgm"
        write_pgm(p, mask_to_bytes(row).reshape(H, W))
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# config

CONFIG_SECTIONS = ("data", "distill")


def load_config(path) -> dict:
    """Read a JSON config ``{"data": {...}, "distill": {...}}``; unknown keys are rejected."""
    from .pipeline import DistillConfig, ToyConfig

    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    allowed = {"data": {f.name for f in fields(ToyConfig)}, "distill": {f.name for f in fields(DistillConfig)}}
    for section, values in raw.items():
        if section not in allowed:
            raise ConfigError(f"{path}: unknown section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: section {section!r} must be an object")
        unknown = set(values) - allowed[section]
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) in {section!r}: {', '.join(sorted(unknown))}")
    return {s: dict(raw.get(s, {})) for s in CONFIG_SECTIONS}


def dump_config(cfg: dict, path) -> None:
    text = json.dumps(cfg, indent=2, sort_keys=True, default=list)
    Path(path).write_text(text + "\n")


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


__all__ = [
    "CheckpointError", "MetricsFormatError", "ConfigError", "MetricsLog", "METRIC_COLUMNS",
    "encode_checkpoint", "decode_checkpoint", "save_checkpoint", "load_checkpoint",
    "write_metrics", "read_metrics", "mask_to_bytes", "write_pgm", "read_pgm", "export_mask_images",
    "load_config", "dump_config", "ensure_dir",
]
