"""Binary file formats: embedding sets/grids and sectioned checkpoints.

Embedding files ("LEGSEMB1") hold unit-norm f32 vectors — flat sets for
queries and negatives, row/col grids for per-keyframe supervision targets.
Checkpoints ("LEGSCKP1") are a named-section container: numeric arrays plus
JSON text sections, all little-endian. Floating-point arrays are stored as
f32; JSON sections carry anything needing full decimal precision.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

EMB_MAGIC = b"LEGSEMB1"
EMB_VERSION = 1
CKP_MAGIC = b"LEGSCKP1"
CKP_VERSION = 1

KIND_FLAT = 0
KIND_GRID = 1

_NORM_SLACK = 1e-3


@dataclasses.dataclass
class EmbeddingRecord:
    """One stored embedding block.

    kind 0 (flat): data shape (count, dim), scale carried but usually 0.
    kind 1 (grid): data shape (rows, cols, dim) at physical scale `scale`.
    """

    kind: int
    scale: float
    data: np.ndarray

    @property
    def dim(self) -> int:
        return self.data.shape[-1]


def write_embeddings(path, records) -> None:
    records = list(records)
    if not records:
        raise DataError("refusing to write an embedding file with no records")
    dim = records[0].data.shape[-1]
    for r in records:
        if r.data.shape[-1] != dim:
            raise DataError(
                f"mixed embedding dims in one file: {r.data.shape[-1]} vs {dim}"
            )
        if r.kind not in (KIND_FLAT, KIND_GRID):
            raise DataError(f"unknown embedding record kind {r.kind}")

    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<III", EMB_VERSION, dim, len(records)))
        for r in records:
            if r.kind == KIND_FLAT:
                flat = np.asarray(r.data)
                if flat.ndim != 2:
                    raise DataError("flat embedding record must be (count, dim)")
                rows, cols = 1, flat.shape[0]
            else:
                if r.data.ndim != 3:
                    raise DataError("grid embedding record must be (rows, cols, dim)")
                rows, cols = r.data.shape[0], r.data.shape[1]
            f.write(struct.pack("<BfII", r.kind, float(r.scale), rows, cols))
            f.write(np.ascontiguousarray(r.data, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataError(f"embedding file truncated while reading {what}")
    return buf


def read_embeddings(path, expected_dim: int | None = None):
    """Read all records; rows more than 1e-3 off unit norm are re-normalized."""
    with open(path, "rb") as f:
        magic = f.read(len(EMB_MAGIC))
        if magic != EMB_MAGIC:
            raise DataError(f"not an embedding file (magic {magic!r}, expected {EMB_MAGIC!r})")
        version, dim, count = struct.unpack("<III", _read_exact(f, 12, "header"))
        if version != EMB_VERSION:
            raise DataError(f"embedding file version {version}, expected {EMB_VERSION}")
        if expected_dim is not None and dim != expected_dim:
            raise DataError(f"embedding file has dim {dim}, expected {expected_dim}")
        records = []
        renormalized = 0
        for i in range(count):
            kind, scale, rows, cols = struct.unpack("<BfII", _read_exact(f, 13, f"record {i} header"))
            if kind not in (KIND_FLAT, KIND_GRID):
                raise DataError(f"record {i}: unknown kind {kind}")
            payload = _read_exact(f, rows * cols * dim * 4, f"record {i} payload")
            data = np.frombuffer(payload, dtype="<f4").reshape(rows * cols, dim).copy()
            norms = np.linalg.norm(data, axis=1)
            off = np.abs(norms - 1.0) > _NORM_SLACK
            if np.any(off):
                renormalized += int(off.sum())
                data[off] = data[off] / np.maximum(norms[off, None], 1e-12)
            if kind == KIND_FLAT:
                data = data.reshape(cols, dim)
            else:
                data = data.reshape(rows, cols, dim)
            records.append(EmbeddingRecord(kind=kind, scale=scale, data=data))
        if renormalized:
            log.warning("%s: re-normalized %d embedding rows off unit norm", path, renormalized)
        return records


# ---------------------------------------------------------------------------
# sectioned checkpoint container
# ---------------------------------------------------------------------------

_SEC_ARRAY = 0
_SEC_JSON = 1

_DTYPES = {
    "<f4": 0,
    "<i8": 1,
    "<i4": 2,
    "|u1": 3,
}
_DTYPE_BY_CODE = {v: k for k, v in _DTYPES.items()}


def _canonical_dtype(arr: np.ndarray) -> np.ndarray:
    if arr.dtype.kind == "f":
        return arr.astype("<f4")
    if arr.dtype == np.int64:
        return arr.astype("<i8")
    if arr.dtype == np.int32:
        return arr.astype("<i4")
    if arr.dtype == np.uint8:
        return arr.astype("|u1")
    raise DataError(f"unsupported checkpoint array dtype {arr.dtype}")


def write_sections(path, sections: dict) -> None:
    """Write named sections: numpy arrays, or any JSON-serializable object."""
    with open(path, "wb") as f:
        f.write(CKP_MAGIC)
        f.write(struct.pack("<II", CKP_VERSION, len(sections)))
        for name, value in sections.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            if isinstance(value, np.ndarray):
                arr = _canonical_dtype(value)  # tobytes() emits C order regardless of layout
                f.write(struct.pack("<BBB", _SEC_ARRAY, _DTYPES[arr.dtype.str], arr.ndim))
                for d in arr.shape:
                    f.write(struct.pack("<Q", d))
                f.write(arr.tobytes())
            else:
                blob = json.dumps(value).encode("utf-8")
                f.write(struct.pack("<B", _SEC_JSON))
                f.write(struct.pack("<Q", len(blob)))
                f.write(blob)


def read_sections(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(len(CKP_MAGIC))
        if magic != CKP_MAGIC:
            raise DataError(f"not a checkpoint file (magic {magic!r}, expected {CKP_MAGIC!r})")
        head = f.read(8)
        if len(head) != 8:
            raise DataError("checkpoint truncated in header")
        version, count = struct.unpack("<II", head)
        if version != CKP_VERSION:
            raise DataError(f"checkpoint version {version}, expected {CKP_VERSION}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_ck(f, 4))
            name = _read_ck(f, nlen).decode("utf-8")
            (sec_kind,) = struct.unpack("<B", _read_ck(f, 1))
            if sec_kind == _SEC_ARRAY:
                code, ndim = struct.unpack("<BB", _read_ck(f, 2))
                if code not in _DTYPE_BY_CODE:
                    raise DataError(f"section {name}: unknown dtype code {code}")
                shape = tuple(
                    struct.unpack("<Q", _read_ck(f, 8))[0] for _ in range(ndim)
                )
                n = int(np.prod(shape)) if shape else 1
                dtype = np.dtype(_DTYPE_BY_CODE[code])
                out[name] = np.frombuffer(
                    _read_ck(f, n * dtype.itemsize), dtype=dtype
                ).reshape(shape).copy()
            elif sec_kind == _SEC_JSON:
                (blen,) = struct.unpack("<Q", _read_ck(f, 8))
                out[name] = json.loads(_read_ck(f, blen).decode("utf-8"))
            else:
                raise DataError(f"section {name}: unknown section kind {sec_kind}")
        return out


def _read_ck(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataError("checkpoint file truncated")
    return buf
