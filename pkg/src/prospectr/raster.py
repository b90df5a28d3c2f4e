"""Multi-band georeferenced rasters, label rasters, windows and file I/O.

The ``.mbr`` container is: 8-byte magic, little-endian uint32 header length,
UTF-8 JSON header, then one little-endian plane per band followed by the
nodata-mask plane, each plane trailed by its CRC32 (uint32 LE).
"""
from __future__ import annotations

import csv
import enum
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"PRSMBR\x00\x01"


class RasterError(ValueError):
    pass


class DimensionError(RasterError):
    pass


class RasterFormatError(RasterError):
    pass


class MagicError(RasterFormatError):
    pass


class ChecksumError(RasterFormatError):
    pass


class TruncatedFileError(RasterFormatError):
    pass


class Label(enum.IntEnum):
    ABSENT = 0
    PRESENT = 1
    UNKNOWN = 255


@dataclass(frozen=True)
class GeoTransform:
    """Affine north-up transform; (row, col) index the pixel's upper-left corner."""

    origin_x: float
    origin_y: float
    pixel_w: float
    pixel_h: float

    def __post_init__(self):
        if self.pixel_w == 0 or self.pixel_h == 0:
            raise RasterError("pixel sizes must be non-zero")

    def pixel_to_map(self, row, col):
        return self.origin_x + np.asarray(col) * self.pixel_w, self.origin_y + np.asarray(row) * self.pixel_h

    def pixel_center(self, row, col):
        return self.pixel_to_map(np.asarray(row) + 0.5, np.asarray(col) + 0.5)

    def map_to_pixel(self, x, y):
        """Integer (row, col) of the pixel containing map coordinate (x, y)."""
        col = np.floor((np.asarray(x, dtype=np.float64) - self.origin_x) / self.pixel_w)
        row = np.floor((np.asarray(y, dtype=np.float64) - self.origin_y) / self.pixel_h)
        return row.astype(np.int64), col.astype(np.int64)

    def to_dict(self) -> dict:
        return {"origin_x": self.origin_x, "origin_y": self.origin_y,
                "pixel_w": self.pixel_w, "pixel_h": self.pixel_h}


@dataclass
class MultiBandRaster:
    data: np.ndarray
    band_names: list[str]
    transform: GeoTransform
    nodata_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DimensionError(f"raster data must be [m, r, c], got {self.data.shape}")
        if len(self.band_names) != self.data.shape[0]:
            raise RasterError("one band name per band is required")
        if len(set(self.band_names)) != len(self.band_names):
            raise RasterError("band names must be unique")
        if self.nodata_mask is None:
            self.nodata_mask = np.zeros(self.data.shape[1:], dtype=bool)
        elif self.nodata_mask.shape != self.data.shape[1:]:
            raise DimensionError("nodata mask shape must equal (rows, cols)")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def select_bands(self, keep: Sequence[int]) -> "MultiBandRaster":
        keep = list(keep)
        return MultiBandRaster(self.data[keep].copy(), [self.band_names[i] for i in keep],
                               self.transform, self.nodata_mask.copy())


@dataclass
class LabelRaster:
    labels: np.ndarray

    @classmethod
    def unknown(cls, shape) -> "LabelRaster":
        return cls(np.full(shape, Label.UNKNOWN, dtype=np.uint8))

    @property
    def shape(self):
        return self.labels.shape

    def ids(self, label: Label) -> np.ndarray:
        """Flat pixel ids (row * cols + col) carrying ``label``."""
        return np.flatnonzero(self.labels.reshape(-1) == label)

    def with_labels(self, ids: Iterable[int], label: Label) -> "LabelRaster":
        out = self.labels.copy()
        out.reshape(-1)[np.asarray(list(ids), dtype=np.int64)] = label
        return LabelRaster(out)


@dataclass
class Sample:
    window: np.ndarray
    center_row: int
    center_col: int
    label: Label = Label.UNKNOWN


@dataclass(frozen=True)
class DepositRecord:
    id: str
    x: float
    y: float
    deposit_type: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise RasterError(f"record {self.id} has non-finite coordinates")


# -- windows -------------------------------------------------------------------

def _check_window(shape, w: int) -> None:
    if w < 1 or w > min(shape):
        raise DimensionError(f"window {w} larger than raster extent {shape}")


def window_at(raster: MultiBandRaster, row: int, col: int, w: int,
              labels: LabelRaster | None = None) -> Sample:
    """The m x w x w window whose index ``w // 2`` sits on (row, col).

    Positions outside the raster are filled by reflection about the edge
    pixel (``... 2 1 | 0 1 2 ...``).
    """
    if not (0 <= row < raster.rows and 0 <= col < raster.cols):
        raise IndexError(f"pixel ({row}, {col}) outside raster {raster.rows}x{raster.cols}")
    _check_window((raster.rows, raster.cols), w)
    rr = _reflect(np.arange(row - w // 2, row - w // 2 + w), raster.rows)
    cc = _reflect(np.arange(col - w // 2, col - w // 2 + w), raster.cols)
    win = raster.data[:, rr[:, None], cc[None, :]]
    label = Label(labels.labels[row, col]) if labels is not None else Label.UNKNOWN
    return Sample(np.ascontiguousarray(win), row, col, label)


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def extract_windows(raster: MultiBandRaster, ids: np.ndarray, w: int, fill_nodata: float = 0.0) -> np.ndarray:
    """Windows for flat pixel ids as a float32 [N, m, w, w] array.

    Non-finite values (nodata pixels) are replaced by ``fill_nodata``.
    """
    _check_window((raster.rows, raster.cols), w)
    ids = np.asarray(ids, dtype=np.int64)
    rows, cols = np.divmod(ids, raster.cols)
    before = w // 2
    after = w - before - 1
    padded = np.pad(raster.data, ((0, 0), (before, after), (before, after)), mode="reflect")
    padded = np.where(np.isfinite(padded), padded, fill_nodata).astype(np.float32)
    view = np.lib.stride_tricks.sliding_window_view(padded, (w, w), axis=(1, 2))
    return np.ascontiguousarray(view[:, rows, cols].transpose(1, 0, 2, 3))


# -- labels ----------------------------------------------------------------

@dataclass
class RasterizeReport:
    present: int = 0
    duplicates: int = 0
    skipped: int = 0
    on_nodata: int = 0
    skipped_ids: list[str] = field(default_factory=list)


def rasterize_records(records: Sequence[DepositRecord], transform: GeoTransform, shape: tuple[int, int],
                      base: LabelRaster | None = None,
                      nodata_mask: np.ndarray | None = None) -> tuple[LabelRaster, RasterizeReport]:
    """Mark the pixel containing each record Present; other pixels keep ``base`` (default Unknown)."""
    labels = LabelRaster.unknown(shape) if base is None else LabelRaster(base.labels.copy())
    report = RasterizeReport()
    hit: set[tuple[int, int]] = set()
    for rec in records:
        r, c = (int(v) for v in transform.map_to_pixel(rec.x, rec.y))
        if not (0 <= r < shape[0] and 0 <= c < shape[1]):
            report.skipped += 1
            report.skipped_ids.append(rec.id)
            continue
        if (r, c) in hit:
            report.duplicates += 1
            continue
        hit.add((r, c))
        if nodata_mask is not None and nodata_mask[r, c]:
            report.on_nodata += 1
            log.warning("record %s falls on a nodata pixel (%d, %d); kept Present", rec.id, r, c)
        labels.labels[r, c] = Label.PRESENT
    report.present = len(hit)
    return labels, report


def read_records(path) -> list[DepositRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["id", "x", "y", "deposit_type"]:
            raise RasterFormatError(f"{path}: expected header id,x,y,deposit_type")
        return [DepositRecord(row["id"], float(row["x"]), float(row["y"]), row["deposit_type"]) for row in reader]


def write_records(path, records: Iterable[DepositRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "x", "y", "deposit_type"])
        for rec in records:
            writer.writerow([rec.id, repr(float(rec.x)), repr(float(rec.y)), rec.deposit_type])


# -- container format ------------------------------------------------------------

_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


def _write(path, data: np.ndarray, names: list[str], transform: GeoTransform,
           nodata_mask: np.ndarray, dtype: str, meta: dict | None = None) -> None:
    m, r, c = data.shape
    header = {"shape": [m, r, c], "band_names": list(names), "transform": transform.to_dict(),
              "dtype": dtype, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<I", zlib.crc32(hbytes)))
        planes = [np.ascontiguousarray(b, dtype=_DTYPES[dtype]) for b in data]
        planes.append(np.ascontiguousarray(nodata_mask, dtype=np.uint8))
        for plane in planes:
            raw = plane.tobytes()
            fh.write(raw)
            fh.write(struct.pack("<I", zlib.crc32(raw)))


def _read(path) -> tuple[dict, np.ndarray, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise MagicError(f"{path}: not a .mbr raster (bad magic)")
    if len(blob) < 12:
        raise TruncatedFileError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", blob[8:12])
    pos = 12 + hlen
    if len(blob) < pos + 4:
        raise TruncatedFileError(f"{path}: truncated header")
    hbytes = blob[12:pos]
    if struct.unpack("<I", blob[pos:pos + 4])[0] != zlib.crc32(hbytes):
        raise ChecksumError(f"{path}: header checksum mismatch")
    pos += 4
    header = json.loads(hbytes)
    m, r, c = header["shape"]
    dtype = _DTYPES[header["dtype"]]

    def plane(dt, name):
        nonlocal pos
        n = r * c * dt.itemsize
        if len(blob) < pos + n + 4:
            raise TruncatedFileError(f"{path}: truncated at plane {name}")
        raw = blob[pos:pos + n]
        if struct.unpack("<I", blob[pos + n:pos + n + 4])[0] != zlib.crc32(raw):
            raise ChecksumError(f"{path}: checksum mismatch in plane {name}")
        pos += n + 4
        return np.frombuffer(raw, dtype=dt).reshape(r, c)

    data = np.stack([plane(dtype, b) for b in header["band_names"]]) if m else np.zeros((0, r, c), dtype)
    mask = plane(np.dtype("u1"), "nodata_mask").astype(bool)
    return header, data, mask


def save_raster(raster: MultiBandRaster, path, meta: dict | None = None) -> None:
    _write(path, raster.data, raster.band_names, raster.transform, raster.nodata_mask, "float32", meta)


def load_raster(path) -> MultiBandRaster:
    header, data, mask = _read(path)
    if header["dtype"] != "float32":
        raise RasterFormatError(f"{path}: expected float32 bands, found {header['dtype']}")
    return MultiBandRaster(data.astype(np.float32), header["band_names"],
                           GeoTransform(**header["transform"]), mask)


def save_labels(labels: LabelRaster, path, transform: GeoTransform) -> None:
    _write(path, labels.labels[None], ["label"], transform,
           np.zeros(labels.shape, dtype=bool), "uint8")


def load_labels(path) -> LabelRaster:
    header, data, _ = _read(path)
    if header["dtype"] != "uint8" or data.shape[0] != 1:
        raise RasterFormatError(f"{path}: not a single-band label raster")
    return LabelRaster(np.array(data[0], dtype=np.uint8))


def read_meta(path) -> dict:
    header, _, _ = _read(path)
    return header.get("meta", {})
