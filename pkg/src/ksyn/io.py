"""On-disk formats: KST tensors, checkpoints, CSV metric reports, PNG frames,
run manifests and output-directory locks.

KST layout (all integers little-endian)::

    b"KSYN" | u32 version | u32 dtype code | u32 ndim | ndim x u64 dims | payload

dtype codes: 0 = float32, 1 = float64, 2 = complex128 (interleaved float64
pairs).  The payload is C-order.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping, Optional

import numpy as np

__all__ = [
    "KST_MAGIC",
    "KST_VERSION",
    "KSTError",
    "write_kst",
    "read_kst",
    "kst_bytes",
    "save_checkpoint",
    "load_checkpoint",
    "DigestMismatchError",
    "CSV_HEADER",
    "write_metric_csv",
    "read_metric_csv",
    "window_to_uint8",
    "export_png",
    "png_name",
    "write_manifest",
    "DirectoryLock",
    "LockError",
    "file_digest",
]

KST_MAGIC = b"KSYN"
KST_VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<c16"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


class KSTError(ValueError):
    """Malformed or unsupported KST stream."""


def _to_storable(arr) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype == np.float32:
        return a.astype("<f4", copy=False)
    if a.dtype == np.complex64 or a.dtype == np.complex128:
        return a.astype("<c16", copy=False)
    if np.issubdtype(a.dtype, np.floating) or np.issubdtype(a.dtype, np.integer) or a.dtype == bool:
        return a.astype("<f8", copy=False)
    raise KSTError(f"cannot store dtype {a.dtype} in KST")


def _write_stream(f: BinaryIO, arr) -> None:
    a = _to_storable(arr)
    f.write(KST_MAGIC)
    f.write(struct.pack("<III", KST_VERSION, _CODES[a.dtype], a.ndim))
    if a.ndim:
        f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    f.write(np.ascontiguousarray(a).tobytes(order="C"))


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise KSTError(f"truncated KST stream: wanted {n} bytes, got {len(b)}")
    return b


def _read_stream(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4) != KST_MAGIC:
        raise KSTError("bad magic, not a KST stream")
    version, code, ndim = struct.unpack("<III", _read_exact(f, 12))
    if version != KST_VERSION:
        raise KSTError(f"unsupported KST version {version}")
    if code not in _DTYPES:
        raise KSTError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim)) if ndim else ()
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    data = _read_exact(f, count * dt.itemsize)
    return np.frombuffer(data, dtype=dt).reshape(shape).copy()


def kst_bytes(arr) -> bytes:
    buf = io.BytesIO()
    _write_stream(buf, arr)
    return buf.getvalue()


def write_kst(path, arr) -> Path:
    """Write one array; float32 stays 32-bit, other reals widen to float64, complex to complex128."""
    path = Path(path)
    with open(path, "wb") as f:
        _write_stream(f, arr)
    return path


def read_kst(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = _read_stream(f)
        if f.read(1):
            raise KSTError(f"trailing bytes after KST payload in {path}")
    return arr


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"KSCK"
CHECKPOINT_VERSION = 1


class DigestMismatchError(RuntimeError):
    """Checkpoint was written under a different config digest."""


def save_checkpoint(path, kind: str, tensors: Mapping[str, np.ndarray], meta: Optional[dict] = None,
                    config_digest: str = "") -> Path:
    """Manifest header (JSON) followed by one KST block per tensor, in manifest order."""
    names = list(tensors)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config_digest": config_digest,
        "tensors": names,
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        f.write(head)
        for n in names:
            _write_stream(f, tensors[n])
    return path


def load_checkpoint(path, expected_digest: Optional[str] = None, allow_mismatch: bool = False,
                    kind: Optional[str] = None):
    """Return ``(manifest, tensors)``.

    A digest differing from ``expected_digest`` raises
    :class:`DigestMismatchError` unless ``allow_mismatch`` is set.
    """
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise KSTError(f"{path} is not a checkpoint")
        version, n = struct.unpack("<IQ", _read_exact(f, 12))
        if version != CHECKPOINT_VERSION:
            raise KSTError(f"unsupported checkpoint version {version}")
        manifest = json.loads(_read_exact(f, n).decode("utf-8"))
        tensors = {name: _read_stream(f) for name in manifest["tensors"]}
    if kind is not None and manifest["kind"] != kind:
        raise KSTError(f"{path} holds a {manifest['kind']!r} checkpoint, expected {kind!r}")
    if expected_digest is not None and manifest["config_digest"] != expected_digest and not allow_mismatch:
        raise DigestMismatchError(
            f"checkpoint digest {manifest['config_digest']} != config digest {expected_digest}; "
            "pass the override flag to load anyway")
    return manifest, tensors


# ---------------------------------------------------------------- CSV reports

CSV_HEADER = ("metric", "value", "stderr", "n_real", "n_synth", "config_digest")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else str(v)
    return str(v)


def write_metric_csv(path, rows: Iterable, header=CSV_HEADER) -> Path:
    """Rows are tuples or objects with a ``row()`` method; floats use ``repr`` so values round-trip."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            r = r.row() if hasattr(r, "row") else r
            w.writerow([_fmt(v) for v in r])
    return path


def read_metric_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------- PNG

def window_to_uint8(mag: np.ndarray, lo_pct: float = 1.0, hi_pct: float = 99.0) -> np.ndarray:
    """Clip to the [1st, 99th] percentile window and map linearly to 0..255."""
    mag = np.abs(np.asarray(mag, dtype=np.float64))
    lo, hi = np.percentile(mag, [lo_pct, hi_pct])
    if hi <= lo:
        return np.zeros(mag.shape, dtype=np.uint8)
    x = np.clip((mag - lo) / (hi - lo), 0.0, 1.0)
    return np.rint(x * 255.0).astype(np.uint8)


def png_name(stem: str, frame: int, domain: str) -> str:
    if domain not in ("kspace", "image"):
        raise ValueError(f"domain must be 'kspace' or 'image', got {domain!r}")
    return f"{stem}_f{frame:03d}_{domain}.png"


def export_png(frame: np.ndarray, path, log: bool = False) -> Path:
    """8-bit grayscale PNG of ``|frame|`` (``log1p`` first when ``log``)."""
    from PIL import Image

    mag = np.abs(frame)
    if log:
        mag = np.log1p(mag)
    path = Path(path)
    Image.fromarray(window_to_uint8(mag), mode="L").save(path, format="PNG")
    return path


# ---------------------------------------------------------------- manifests, locks

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, record: dict, name: str = "manifest.json") -> Path:
    path = Path(out_dir) / name
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


class LockError(RuntimeError):
    """Another run holds the output directory."""


class DirectoryLock:
    """Exclusive ``.ksyn.lock`` file in an output directory (created with O_EXCL)."""

    name = ".ksyn.lock"

    def __init__(self, directory):
        self.path = Path(directory) / self.name
        self._held = False

    def acquire(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(f"output directory is locked by another run: {self.path}") from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self._held = True
        return self

    def release(self):
        if self._held:
            self.path.unlink(missing_ok=True)
            self._held = False

    def __enter__(self):
        return self.acquire()

    def __exit__(self, *exc):
        self.release()
