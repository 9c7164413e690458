"""File formats: IDX tensors, matrix CSV tables and prediction-stack CSV.

IDX layout (big-endian)::

    byte 0-1   0x00 0x00
    byte 2     element type (0x08 = unsigned byte; the only type supported)
    byte 3     number of dimensions
    then ndim  uint32 dimension sizes, then the row-major payload.
"""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from alquery.errors import FormatError, ShapeError
from alquery.pool import SamplePool, create_pool

IDX_UBYTE = 0x08


@dataclass(frozen=True, eq=False)
class RawTensor:
    dims: tuple[int, ...]
    data: np.ndarray  # flat, row-major

    def __post_init__(self):
        if math.prod(self.dims) != self.data.size:
            raise ShapeError(f"dims {self.dims} do not match {self.data.size} elements")

    def array(self) -> np.ndarray:
        return self.data.reshape(self.dims)


def parse_idx(buf: bytes) -> RawTensor:
    """Decode an IDX byte stream.

    Raises:
        FormatError: bad magic, unsupported element type, or a payload that
            is shorter or longer than the header declares.
    """
    buf = bytes(buf)
    if len(buf) < 4:
        raise FormatError("IDX stream shorter than its 4-byte magic")
    if buf[0] != 0 or buf[1] != 0:
        raise FormatError("IDX magic must start with two zero bytes")
    dtype_code, ndim = buf[2], buf[3]
    if dtype_code != IDX_UBYTE:
        raise FormatError(f"unsupported IDX element type 0x{dtype_code:02x}")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError("truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    n = math.prod(dims)
    payload = len(buf) - header
    if payload < n:
        raise FormatError(f"truncated IDX payload: expected {n} bytes, found {payload}")
    if payload > n:
        raise FormatError(f"IDX payload has {payload - n} trailing bytes")
    data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=header).copy()
    return RawTensor(tuple(int(d) for d in dims), data)


def serialize_idx(tensor: RawTensor | np.ndarray) -> bytes:
    """Encode an unsigned-byte tensor (or array) in IDX format."""
    if isinstance(tensor, RawTensor):
        dims, data = tensor.dims, tensor.data
    else:
        arr = np.asarray(tensor)
        dims, data = arr.shape, arr.ravel()
    if len(dims) > 255:
        raise FormatError("IDX supports at most 255 dimensions")
    values = np.asarray(data)
    if values.size and (values.min() < 0 or values.max() > 255 or not np.all(values == np.round(values))):
        raise FormatError("IDX writer only supports unsigned 8-bit values")
    head = bytes([0, 0, IDX_UBYTE, len(dims)]) + struct.pack(f">{len(dims)}I", *dims)
    return head + values.astype(np.uint8).tobytes()


def read_idx(path: str | Path) -> RawTensor:
    """Read an IDX file; ``.gz`` files are decompressed transparently."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return parse_idx(fh.read())


def write_idx(path: str | Path, tensor: RawTensor | np.ndarray) -> None:
    Path(path).write_bytes(serialize_idx(tensor))


def images_to_matrix(
    images: RawTensor | np.ndarray,
    standardize: bool = False,
    downsample: int = 1,
) -> np.ndarray:
    """Flatten ``[n, H, W]`` images into rows scaled to [0, 1].

    ``downsample`` block-averages each image by an integer factor (1 keeps
    the input resolution). ``standardize`` additionally rescales each image
    to zero mean and unit variance.
    """
    arr = images.array() if isinstance(images, RawTensor) else np.asarray(images)
    if arr.ndim < 2:
        raise ShapeError("expected a stack of images with a leading sample axis")
    x = arr.astype(np.float64) / 255.0
    if downsample > 1:
        if x.ndim != 3:
            raise ShapeError("downsampling needs [n, H, W] images")
        n, h, w = x.shape
        h2, w2 = h // downsample, w // downsample
        x = x[:, : h2 * downsample, : w2 * downsample]
        x = x.reshape(n, h2, downsample, w2, downsample).mean(axis=(2, 4))
    x = x.reshape(x.shape[0], -1)
    if standardize:
        mu = x.mean(axis=1, keepdims=True)
        sd = x.std(axis=1, keepdims=True)
        x = (x - mu) / np.where(sd > 0, sd, 1.0)
    return x


# -- matrix CSV --------------------------------------------------------------


def _parse_cell(text: str) -> Hashable:
    try:
        return int(text)
    except ValueError:
        return text


def read_matrix_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None, list[Hashable]]:
    """Read a ``id,dim0,...,dim{k-1}[,label][,group]`` table.

    Returns:
        ``(matrix, labels, groups, ids)``; labels/groups are ``None`` when
        the column is absent.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "id":
            raise FormatError(f"{path}: first column must be 'id'")
        dim_cols = [i for i, h in enumerate(header) if h.startswith("dim")]
        expected = [f"dim{k}" for k in range(len(dim_cols))]
        if not dim_cols or [header[i] for i in dim_cols] != expected or dim_cols != list(range(1, len(dim_cols) + 1)):
            raise FormatError(f"{path}: expected contiguous dim0..dim{{k-1}} columns after 'id'")
        extra = header[1 + len(dim_cols):]
        for name in extra:
            if name not in ("label", "group"):
                raise FormatError(f"{path}: unexpected column {name!r}")
        label_col = header.index("label") if "label" in header else None
        group_col = header.index("group") if "group" in header else None

        ids, rows, labels, groups = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: {len(row)} cells under a {len(header)}-column header")
            ids.append(_parse_cell(row[0]))
            try:
                rows.append([float(row[i]) for i in dim_cols])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if label_col is not None:
                labels.append(_parse_cell(row[label_col]))
            if group_col is not None:
                groups.append(_parse_cell(row[group_col]))
    matrix = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(dim_cols))
    return (
        matrix,
        np.asarray(labels) if label_col is not None else None,
        np.asarray(groups) if group_col is not None else None,
        ids,
    )


def write_matrix_csv(
    path: str | Path,
    matrix,
    labels=None,
    groups=None,
    ids: Sequence[Hashable] | None = None,
) -> None:
    """Write the matrix CSV format; reals use ``repr`` so they round-trip exactly."""
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("matrix must be 2-D")
    n, k = x.shape
    ids = list(range(n)) if ids is None else list(ids)
    header = ["id"] + [f"dim{j}" for j in range(k)]
    if labels is not None:
        header.append("label")
    if groups is not None:
        header.append("group")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(n):
            row = [ids[i]] + [repr(float(v)) for v in x[i]]
            if labels is not None:
                row.append(_plain(labels[i]))
            if groups is not None:
                row.append(_plain(groups[i]))
            w.writerow(row)


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


def read_pool_csv(path: str | Path) -> SamplePool:
    matrix, labels, groups, ids = read_matrix_csv(path)
    return create_pool(matrix, labels=labels, groups=groups, sample_ids=ids)


def write_pool_csv(path: str | Path, pool: SamplePool) -> None:
    write_matrix_csv(path, pool.embeddings, pool.labels, pool.groups, pool.sample_ids)


# -- prediction stacks -----------------------------------------------------------

STACK_COLUMNS = ["sample_id", "mc_index", "pixel_index", "label", "probability"]


def read_prediction_stacks(path: str | Path):
    """Read ``sample_id,mc_index,pixel_index,label,probability`` rows.

    Returns a dict mapping sample id to :class:`~alquery.scoring.PredictionStack`.
    Every (mc, pixel, label) cell of a sample must be present exactly once.
    """
    from alquery.scoring import PredictionStack

    cells: dict[Hashable, list[tuple[int, int, int, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != STACK_COLUMNS:
            raise FormatError(f"{path}: expected header {','.join(STACK_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 cells, got {len(row)}")
            try:
                cells.setdefault(_parse_cell(row[0]), []).append(
                    (int(row[1]), int(row[2]), int(row[3]), float(row[4]))
                )
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    stacks = {}
    for sid, entries in cells.items():
        arr = np.asarray(entries, dtype=np.float64)
        idx = arr[:, :3].astype(np.intp)
        if idx.min() < 0:
            raise FormatError(f"{path}: negative index for sample {sid!r}")
        shape = tuple(idx.max(axis=0) + 1)
        values = np.full(shape, np.nan)
        values[idx[:, 0], idx[:, 1], idx[:, 2]] = arr[:, 3]
        if len(entries) != math.prod(shape) or np.isnan(values).any():
            raise FormatError(f"{path}: incomplete or duplicated cells for sample {sid!r}")
        stacks[sid] = PredictionStack(values, sample_id=sid)
    return stacks


def write_prediction_stacks(path: str | Path, stacks) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STACK_COLUMNS)
        for stack in stacks:
            n_mc, n_pix, n_lab = stack.values.shape
            for m in range(n_mc):
                for p in range(n_pix):
                    for lab in range(n_lab):
                        w.writerow([_plain(stack.sample_id), m, p, lab, repr(float(stack.values[m, p, lab]))])
