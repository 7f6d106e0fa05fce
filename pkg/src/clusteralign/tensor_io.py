"""Binary tensor container and CSV import/export.

File layout: magic b"CATN", u32 rank, u32 per-axis sizes, then the
row-major float64 payload. All integers and floats are little-endian.
"""

import csv
import struct
import numpy as np

MAGIC = b"CATN"


class TensorFormatError(ValueError):
    """Parse failure with the byte offset where it was detected."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_tensor(path, arr):
    arr = np.asarray(arr, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(arr.tobytes(order="C"))


def load_tensor(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise TensorFormatError("bad magic", 0)
    offset = 4
    if len(blob) < offset + 4:
        raise TensorFormatError("truncated rank field", offset)
    (rank,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if rank > 32:
        raise TensorFormatError(f"implausible rank {rank}", 4)
    shape = []
    for _ in range(rank):
        if len(blob) < offset + 4:
            raise TensorFormatError("truncated shape field", offset)
        (dim,) = struct.unpack_from("<I", blob, offset)
        shape.append(dim)
        offset += 4
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    need = count * 8
    if len(blob) != offset + need:
        raise TensorFormatError(
            f"payload size mismatch: expected {need} bytes", offset
        )
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return data.reshape(shape).astype(float)


def export_csv(path, arr):
    """Write a 2-D array as plain CSV (repr-exact floats)."""
    arr = np.asarray(arr, dtype=float)
    if arr.ndim != 2:
        raise ValueError("CSV export supports 2-D arrays only")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in arr:
            writer.writerow([repr(float(v)) for v in row])


def import_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from exc
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    width = len(rows[0])
    for line_no, row in enumerate(rows, start=1):
        if len(row) != width:
            raise ValueError(f"{path}:{line_no}: ragged row")
    return np.array(rows, dtype=float)
