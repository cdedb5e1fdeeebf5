"""On-disk formats: binary tensors, descriptor sets, checkpoints.

Tensor files are little-endian and self-describing:

    magic   4 bytes  b"VPRK"
    version u16      format version (currently 1)
    dtype   u8       1 = float32 (the only defined tag)
    rank    u8
    dims    rank x u32
    payload row-major float32

Descriptor sets pair a rank-2 tensor file with a CSV sidecar
(``id,lat,lon,place_id``, one row per descriptor, same order).

Checkpoints wrap a JSON header (config echo plus tensor names) followed
by one tensor blob per parameter:

    magic   4 bytes  b"VPRC"
    version u16
    hlen    u32      header length in bytes
    header  JSON, utf-8
    blobs   one VPRK tensor per header["tensors"] entry, in order
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"VPRK"
CHECKPOINT_MAGIC = b"VPRC"
FORMAT_VERSION = 1
DTYPE_F32 = 1


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = TENSOR_MAGIC + struct.pack("<HBB", FORMAT_VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + arr.tobytes()


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def read_tensor_stream(fh) -> np.ndarray:
    magic = _read_exact(fh, 4, "magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    version, dtype, rank = struct.unpack("<HBB", _read_exact(fh, 4, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype tag {dtype}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def load_tensor(path: str | Path) -> np.ndarray:
    with Path(path).open("rb") as fh:
        arr = read_tensor_stream(fh)
        if fh.read(1):
            raise FormatError("trailing bytes after tensor payload")
    return arr


# ---------------------------------------------------------------------------
# Descriptor sets (tensor + metadata sidecar)
# ---------------------------------------------------------------------------

SIDECAR_HEADER = ["id", "lat", "lon", "place_id"]


@dataclass
class DescriptorSet:
    """N descriptors with aligned retrieval metadata."""

    vectors: np.ndarray
    ids: list[str]
    lats: np.ndarray
    lons: np.ndarray
    place_ids: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.lats = np.asarray(self.lats, dtype=np.float64)
        self.lons = np.asarray(self.lons, dtype=np.float64)
        self.place_ids = np.asarray(self.place_ids, dtype=np.int64)
        n = self.vectors.shape[0]
        if not (len(self.ids) == len(self.lats) == len(self.lons) == len(self.place_ids) == n):
            raise ValueError("metadata misaligned with vectors")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def sidecar_path(tensor_path: str | Path) -> Path:
    return Path(tensor_path).with_suffix(".csv")


def save_descriptors(path: str | Path, ds: DescriptorSet) -> None:
    save_tensor(path, ds.vectors)
    with sidecar_path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SIDECAR_HEADER)
        for i in range(len(ds)):
            writer.writerow(
                [ds.ids[i], repr(float(ds.lats[i])), repr(float(ds.lons[i])), int(ds.place_ids[i])]
            )


def load_descriptors(path: str | Path) -> DescriptorSet:
    vectors = load_tensor(path).astype(np.float64)
    if vectors.ndim != 2:
        raise FormatError(f"descriptor tensor must be rank 2, got rank {vectors.ndim}")
    ids, lats, lons, pids = [], [], [], []
    side = sidecar_path(path)
    with side.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SIDECAR_HEADER:
            raise FormatError(f"bad sidecar header in {side}")
        for row in reader:
            if not row:
                continue
            ids.append(row[0])
            lats.append(float(row[1]))
            lons.append(float(row[2]))
            pids.append(int(row[3]))
    if len(ids) != vectors.shape[0]:
        raise FormatError(
            f"sidecar has {len(ids)} rows but tensor has {vectors.shape[0]}"
        )
    return DescriptorSet(vectors, ids, np.array(lats), np.array(lons), np.array(pids))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, kind: str, tensors: dict[str, np.ndarray], config: dict) -> None:
    header = {
        "format": FORMAT_VERSION,
        "aggregator": kind,
        "tensors": list(tensors.keys()),
        "config": config,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for name in header["tensors"]:
        buf.write(tensor_bytes(tensors[name]))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray], dict]:
    """Returns (aggregator kind, tensors by name, config echo)."""
    with Path(path).open("rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version, hlen = struct.unpack("<HI", _read_exact(fh, 6, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(_read_exact(fh, hlen, "json header").decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"corrupt checkpoint header: {exc}") from exc
        tensors = {}
        for name in header["tensors"]:
            tensors[name] = read_tensor_stream(fh).astype(np.float64)
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint tensors")
    return header["aggregator"], tensors, header.get("config", {})
