"""Minimal GeoTIFF reader/writer.

Supports the baseline subset this project needs for interchange:
uncompressed, chunky (band-interleaved) striped classic TIFF with the
GeoTIFF geometry tags (ModelPixelScale, ModelTiepoint, GeoKeyDirectory)
and the GDAL nodata convention (ASCII tag 42113). Reading handles both
byte orders and multi-strip files; writing emits little-endian single-strip
files. Tiled or compressed files are rejected as unsupported.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

# TIFF tag ids
_IMAGE_WIDTH = 256
_IMAGE_LENGTH = 257
_BITS_PER_SAMPLE = 258
_COMPRESSION = 259
_PHOTOMETRIC = 262
_STRIP_OFFSETS = 273
_SAMPLES_PER_PIXEL = 277
_ROWS_PER_STRIP = 278
_STRIP_BYTE_COUNTS = 279
_PLANAR_CONFIG = 284
_SAMPLE_FORMAT = 339
_TILE_WIDTH = 322
_TILE_LENGTH = 323
_MODEL_PIXEL_SCALE = 33550
_MODEL_TIEPOINT = 33922
_GEO_KEY_DIRECTORY = 34735
_GEO_ASCII_PARAMS = 34737
_GDAL_NODATA = 42113

# GeoTIFF key ids
_GT_MODEL_TYPE = 1024
_GT_RASTER_TYPE = 1025
_GT_CITATION = 1026
_PROJECTED_CS_TYPE = 3072

_TYPE_SIZES = {1: 1, 2: 1, 3: 2, 4: 4, 5: 8, 6: 1, 7: 1, 8: 2, 9: 4, 10: 8, 11: 4, 12: 8}

# (sample_format, bits) -> numpy dtype char
_DTYPES = {
    (1, 8): "u1", (1, 16): "u2", (1, 32): "u4", (1, 64): "u8",
    (2, 8): "i1", (2, 16): "i2", (2, 32): "i4", (2, 64): "i8",
    (3, 32): "f4", (3, 64): "f8",
}
_SAMPLE_FORMATS = {"u": 1, "i": 2, "f": 3}


def _read_entry_values(buf: bytes, entry: bytes, bo: str):
    tag, typ, count = struct.unpack(bo + "HHI", entry[:8])
    size = _TYPE_SIZES.get(typ)
    if size is None:
        return tag, None
    nbytes = size * count
    if nbytes <= 4:
        raw = entry[8:8 + nbytes]
    else:
        (offset,) = struct.unpack(bo + "I", entry[8:12])
        raw = buf[offset:offset + nbytes]
        if len(raw) < nbytes:
            raise DataError("corrupt header: tag value block out of bounds")
    if typ == 2:  # ASCII
        return tag, raw.split(b"\x00")[0].decode("ascii", errors="replace")
    fmt = {1: "B", 3: "H", 4: "I", 6: "b", 8: "h", 9: "i", 11: "f", 12: "d"}.get(typ)
    if fmt is None:  # RATIONAL types unused here
        return tag, None
    return tag, list(struct.unpack(bo + fmt * count, raw))


def read_geotiff(path) -> dict:
    """Parse a GeoTIFF file into a dict with 'values' (rows, cols, bands array),
    'origin_x', 'origin_y', 'pixel_size', 'crs_id', 'nodata'."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing file: {p}")
    buf = p.read_bytes()
    if len(buf) < 8:
        raise DataError(f"corrupt header: {p}")
    if buf[:2] == b"II":
        bo = "<"
    elif buf[:2] == b"MM":
        bo = ">"
    else:
        raise DataError(f"unsupported container (not a TIFF): {p}")
    magic, ifd_offset = struct.unpack(bo + "HI", buf[2:8])
    if magic != 42:
        raise DataError(f"unsupported container (bad TIFF magic {magic}): {p}")

    if ifd_offset + 2 > len(buf):
        raise DataError(f"corrupt header: IFD offset out of bounds: {p}")
    (n_entries,) = struct.unpack(bo + "H", buf[ifd_offset:ifd_offset + 2])
    tags: dict[int, object] = {}
    for i in range(n_entries):
        off = ifd_offset + 2 + 12 * i
        entry = buf[off:off + 12]
        if len(entry) < 12:
            raise DataError(f"corrupt header: truncated IFD: {p}")
        tag, values = _read_entry_values(buf, entry, bo)
        tags[tag] = values

    if _TILE_WIDTH in tags or _TILE_LENGTH in tags:
        raise DataError(f"unsupported container (tiled TIFF): {p}")
    compression = (tags.get(_COMPRESSION) or [1])[0]
    if compression != 1:
        raise DataError(f"unsupported container (compression {compression}): {p}")
    planar = (tags.get(_PLANAR_CONFIG) or [1])[0]
    if planar != 1:
        raise DataError(f"unsupported container (planar config {planar}): {p}")

    try:
        cols = tags[_IMAGE_WIDTH][0]
        rows = tags[_IMAGE_LENGTH][0]
        strip_offsets = tags[_STRIP_OFFSETS]
        strip_counts = tags[_STRIP_BYTE_COUNTS]
    except (KeyError, TypeError):
        raise DataError(f"corrupt header: required tags missing: {p}")
    bands = (tags.get(_SAMPLES_PER_PIXEL) or [1])[0]
    bits = tags.get(_BITS_PER_SAMPLE) or [8]
    formats = tags.get(_SAMPLE_FORMAT) or [1] * bands
    if len(set(bits)) != 1 or len(set(formats)) != 1:
        raise DataError(f"unsupported container (mixed band types): {p}")
    key = (formats[0], bits[0])
    if key not in _DTYPES:
        raise DataError(f"unsupported container (sample format {key}): {p}")
    dtype = np.dtype(bo + _DTYPES[key])

    data = b"".join(buf[o:o + c] for o, c in zip(strip_offsets, strip_counts))
    expected = rows * cols * bands * dtype.itemsize
    if len(data) < expected:
        raise DataError(f"corrupt file: pixel data truncated: {p}")
    values = np.frombuffer(data[:expected], dtype=dtype).reshape(rows, cols, bands)
    values = values.astype(values.dtype.newbyteorder("="))

    scale = tags.get(_MODEL_PIXEL_SCALE)
    tiepoint = tags.get(_MODEL_TIEPOINT)
    if not scale or not tiepoint:
        raise DataError(f"corrupt header: GeoTIFF geometry tags missing: {p}")
    sx, sy = abs(scale[0]), abs(scale[1])
    if abs(sx - sy) > 1e-9 * max(sx, sy):
        raise DataError(f"unsupported container (non-square pixels {sx}x{sy}): {p}")
    # tiepoint maps raster (i, j) to model (x, y); require the top-left anchor
    i, j = tiepoint[0], tiepoint[1]
    origin_x = tiepoint[3] - j * sx
    origin_y = tiepoint[4] + i * sy

    crs_id = _parse_crs(tags)
    nodata = None
    nd = tags.get(_GDAL_NODATA)
    if isinstance(nd, str) and nd.strip():
        try:
            nodata = float(nd.strip())
        except ValueError:
            nodata = None

    return {
        "values": values,
        "origin_x": origin_x,
        "origin_y": origin_y,
        "pixel_size": sx,
        "crs_id": crs_id,
        "nodata": nodata,
    }


def _parse_crs(tags) -> str:
    keys = tags.get(_GEO_KEY_DIRECTORY)
    ascii_params = tags.get(_GEO_ASCII_PARAMS) or ""
    citation = None
    epsg = None
    if keys and len(keys) >= 4:
        nkeys = keys[3]
        for k in range(1, nkeys + 1):
            entry = keys[4 * k:4 * k + 4]
            if len(entry) < 4:
                break
            key_id, location, count, value = entry
            if key_id == _PROJECTED_CS_TYPE and location == 0:
                epsg = value
            elif key_id == _GT_CITATION and location == _GEO_ASCII_PARAMS:
                citation = ascii_params[value:value + count].rstrip("|")
    if citation:
        return citation
    if epsg:
        return f"EPSG:{epsg}"
    return "UNKNOWN"


def write_geotiff(path, values: np.ndarray, origin_x: float, origin_y: float,
                  pixel_size: float, crs_id: str, nodata=None) -> None:
    """Write (rows, cols, bands) array as a little-endian uncompressed GeoTIFF."""
    if values.ndim == 2:
        values = values[:, :, None]
    rows, cols, bands = values.shape
    kind = values.dtype.kind
    if kind not in _SAMPLE_FORMATS:
        raise DataError(f"unsupported dtype for GeoTIFF: {values.dtype}")
    sample_format = _SAMPLE_FORMATS[kind]
    bits = values.dtype.itemsize * 8

    payload = np.ascontiguousarray(values, dtype=values.dtype.newbyteorder("<")).tobytes()
    data_offset = 8
    ifd_offset = data_offset + len(payload)
    if ifd_offset % 2:
        payload += b"\x00"
        ifd_offset += 1

    citation = (crs_id + "|").encode("ascii") + b"\x00"
    epsg = None
    if crs_id.upper().startswith("EPSG:"):
        try:
            code = int(crs_id.split(":", 1)[1])
            if 0 < code < 65535:
                epsg = code
        except ValueError:
            pass
    geo_keys = [1, 1, 0, 0,
                _GT_MODEL_TYPE, 0, 1, 1,
                _GT_RASTER_TYPE, 0, 1, 1,
                _GT_CITATION, _GEO_ASCII_PARAMS, len(citation) - 1, 0]
    if epsg is not None:
        geo_keys += [_PROJECTED_CS_TYPE, 0, 1, epsg]
    geo_keys[3] = len(geo_keys) // 4 - 1

    entries: list[tuple[int, int, list]] = [
        (_IMAGE_WIDTH, 4, [cols]),
        (_IMAGE_LENGTH, 4, [rows]),
        (_BITS_PER_SAMPLE, 3, [bits] * bands),
        (_COMPRESSION, 3, [1]),
        (_PHOTOMETRIC, 3, [1]),
        (_STRIP_OFFSETS, 4, [data_offset]),
        (_SAMPLES_PER_PIXEL, 3, [bands]),
        (_ROWS_PER_STRIP, 4, [rows]),
        (_STRIP_BYTE_COUNTS, 4, [len(values.tobytes())]),
        (_PLANAR_CONFIG, 3, [1]),
        (_SAMPLE_FORMAT, 3, [sample_format] * bands),
        (_MODEL_PIXEL_SCALE, 12, [pixel_size, pixel_size, 0.0]),
        (_MODEL_TIEPOINT, 12, [0.0, 0.0, 0.0, origin_x, origin_y, 0.0]),
        (_GEO_KEY_DIRECTORY, 3, geo_keys),
        (_GEO_ASCII_PARAMS, 2, citation),
    ]
    if nodata is not None:
        nd = repr(float(nodata)).encode("ascii") + b"\x00"
        entries.append((_GDAL_NODATA, 2, nd))
    entries.sort(key=lambda e: e[0])

    ifd_size = 2 + 12 * len(entries) + 4
    extra_offset = ifd_offset + ifd_size
    ifd = struct.pack("<H", len(entries))
    extra = b""
    fmt_chars = {2: "s", 3: "H", 4: "I", 12: "d"}
    for tag, typ, vals in entries:
        if typ == 2:
            raw = bytes(vals)
            count = len(raw)
        else:
            raw = struct.pack("<" + fmt_chars[typ] * len(vals), *vals)
            count = len(vals)
        if len(raw) <= 4:
            ifd += struct.pack("<HHI", tag, typ, count) + raw.ljust(4, b"\x00")
        else:
            if (extra_offset + len(extra)) % 2:
                extra += b"\x00"
            ifd += struct.pack("<HHII", tag, typ, count, extra_offset + len(extra))
            extra += raw
    ifd += struct.pack("<I", 0)  # no next IFD

    header = b"II" + struct.pack("<HI", 42, ifd_offset)
    Path(path).write_bytes(header + payload + ifd + extra)
