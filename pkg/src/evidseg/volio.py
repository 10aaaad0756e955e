"""Bit-exact file formats: EVOL volumes, CSV tables, SVG line plots.

The EVOL container is deliberately tiny: a 28-byte little-endian header
(magic ``EVOL``, version, dims, channels, dtype tag, three reserved zero
bytes) followed by the raw payload in channel-major z, y, x order.  Two
dtypes exist: 0 is 32-bit real (Volume), 1 is unsigned 8-bit (LabelVolume,
single channel).  Readers reject anything malformed: wrong magic, unknown
version, nonzero reserved bytes, or a payload whose byte count is not
exactly what the header promises.

All writers are atomic (write to a sibling temp file, then rename) and
produce byte-identical output for identical inputs: no timestamps, fixed
'.' decimal separator, fixed "\\n" line endings.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .volume import LabelVolume, Volume

__all__ = [
    "FormatError",
    "write_volume",
    "read_volume",
    "write_csv",
    "write_svg_lineplot",
    "atomic_write_bytes",
]

MAGIC = b"EVOL"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIB3s")  # 28 bytes
HEADER_SIZE = _HEADER.size

DTYPE_F32 = 0
DTYPE_U8 = 1


class FormatError(Exception):
    """A file does not conform to the EVOL/EVCK on-disk contract."""


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write-to-temp-then-rename so readers never see partial files."""
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        raise OSError(f"cannot write {path!r}: {e}") from e


def _atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_volume(path: str, v: Volume | LabelVolume) -> None:
    """Serialize a Volume (dtype 0) or LabelVolume (dtype 1) to EVOL."""
    if not isinstance(v, (Volume, LabelVolume)):
        raise TypeError(f"expected Volume or LabelVolume, got {type(v).__name__}")
    x, y, z = v.dims
    if isinstance(v, Volume):
        header = _HEADER.pack(MAGIC, VERSION, x, y, z, v.channels, DTYPE_F32, b"\0\0\0")
        payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    else:
        header = _HEADER.pack(MAGIC, VERSION, x, y, z, 1, DTYPE_U8, b"\0\0\0")
        payload = np.ascontiguousarray(v.data, dtype=np.uint8).tobytes()
    atomic_write_bytes(path, header + payload)


def read_volume(path: str) -> Volume | LabelVolume:
    """Exact inverse of :func:`write_volume`; malformed files raise FormatError."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise OSError(f"cannot read {path!r}: {e}") from e
    if len(blob) < HEADER_SIZE:
        raise FormatError(
            f"{path!r}: header needs {HEADER_SIZE} bytes, file has {len(blob)}"
        )
    magic, version, x, y, z, channels, dtype, reserved = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path!r}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path!r}: unsupported version {version}, expected {VERSION}")
    if reserved != b"\0\0\0":
        raise FormatError(f"{path!r}: reserved bytes must be zero, got {reserved!r}")
    if min(x, y, z) < 1 or channels < 1:
        raise FormatError(f"{path!r}: invalid geometry dims=({x},{y},{z}) channels={channels}")
    if dtype not in (DTYPE_F32, DTYPE_U8):
        raise FormatError(f"{path!r}: unknown dtype tag {dtype}")
    if dtype == DTYPE_U8 and channels != 1:
        raise FormatError(f"{path!r}: label volumes must have 1 channel, got {channels}")
    item = 4 if dtype == DTYPE_F32 else 1
    expected = x * y * z * channels * item
    actual = len(blob) - HEADER_SIZE
    if actual != expected:
        raise FormatError(f"{path!r}: expected {expected} payload bytes, got {actual}")
    raw = blob[HEADER_SIZE:]
    if dtype == DTYPE_F32:
        data = np.frombuffer(raw, dtype="<f4").reshape(channels, z, y, x)
        return Volume(dims=(x, y, z), channels=channels, data=data.astype(np.float32))
    data = np.frombuffer(raw, dtype=np.uint8).reshape(z, y, x)
    return LabelVolume(dims=(x, y, z), data=data.copy())


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    return f"{float(v):.6g}"


def write_csv(path: str, rows: list[dict]) -> None:
    """Sorted-key header, one row per dict, numbers at 6 significant digits.

    Every row must carry exactly the same key set.  String values pass
    through verbatim (used for e.g. a head-name column).
    """
    if not rows:
        _atomic_write_text(path, "\n")
        return
    keys = sorted(rows[0].keys())
    lines = [",".join(keys)]
    for i, row in enumerate(rows):
        if sorted(row.keys()) != keys:
            raise ValueError(f"row {i} keys {sorted(row.keys())} differ from {keys}")
        lines.append(",".join(_fmt(row[k]) for k in keys))
    _atomic_write_text(path, "\n".join(lines) + "\n")


_PALETTE = ("#1b6ca8", "#d1495b", "#3a7d44", "#8a5a83", "#c98a2b", "#4a4a4a")

_W, _H = 640, 480
_ML, _MR, _MT, _MB = 60, 20, 20, 50
_X0, _X1 = _ML, _W - _MR          # plot x extent: 60..620
_Y0, _Y1 = _H - _MB, _MT          # plot y extent: 430 (bottom) .. 20 (top)


def _ranges(series) -> tuple[float, float, float, float]:
    xs = [x for _, sx, _ in series for x in sx]
    ys = [y for _, _, sy in series for y in sy]
    if not xs:
        return 0.0, 1.0, 0.0, 1.0
    xlo, xhi = min(xs), max(xs)
    ylo, yhi = min(ys), max(ys)
    if xhi == xlo:
        xlo, xhi = xlo - 0.5, xhi + 0.5
    pad = 0.05 * (yhi - ylo)  # 5% of the data range on each side
    if pad == 0.0:
        pad = 0.5
    return xlo, xhi, ylo - pad, yhi + pad


def write_svg_lineplot(
    path: str,
    series: list[tuple[str, list[float], list[float]]],
    xlabel: str = "",
    ylabel: str = "",
    title: str = "",
) -> None:
    """Standalone SVG with axes, legend, and one polyline per series.

    Layout contract (fixed so plots are testable from their coordinates):
    640x480 canvas, plot rectangle x in [60, 620], y in [20, 430]; x maps
    linearly over the data range, y over the data range padded by 5% on
    each side (0.5 absolute if the range is degenerate).  Coordinates are
    printed with 2 decimals.
    """
    for name, xs, ys in series:
        if len(xs) != len(ys):
            raise ValueError(f"series {name!r}: {len(xs)} xs vs {len(ys)} ys")
    xlo, xhi, ylo, yhi = _ranges(series)

    def sx(x: float) -> float:
        return _X0 + (x - xlo) / (xhi - xlo) * (_X1 - _X0)

    def sy(y: float) -> float:
        return _Y0 - (y - ylo) / (yhi - ylo) * (_Y0 - _Y1)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<line x1="{_X0}" y1="{_Y0}" x2="{_X1}" y2="{_Y0}" stroke="black"/>',
        f'<line x1="{_X0}" y1="{_Y0}" x2="{_X0}" y2="{_Y1}" stroke="black"/>',
    ]
    font = 'font-family="sans-serif" font-size="12"'
    parts.append(
        f'<text x="{_X0}" y="{_Y0 + 16}" {font} text-anchor="middle">{_fmt(xlo)}</text>'
    )
    parts.append(
        f'<text x="{_X1}" y="{_Y0 + 16}" {font} text-anchor="middle">{_fmt(xhi)}</text>'
    )
    parts.append(
        f'<text x="{_X0 - 6}" y="{_Y0 + 4}" {font} text-anchor="end">{_fmt(ylo)}</text>'
    )
    parts.append(
        f'<text x="{_X0 - 6}" y="{_Y1 + 4}" {font} text-anchor="end">{_fmt(yhi)}</text>'
    )
    if xlabel:
        parts.append(
            f'<text x="{(_X0 + _X1) / 2:.2f}" y="{_H - 12}" {font} '
            f'text-anchor="middle">{xlabel}</text>'
        )
    if ylabel:
        parts.append(
            f'<text x="16" y="{(_Y0 + _Y1) / 2:.2f}" {font} text-anchor="middle" '
            f'transform="rotate(-90 16 {(_Y0 + _Y1) / 2:.2f})">{ylabel}</text>'
        )
    if title:
        parts.append(
            f'<text x="{(_X0 + _X1) / 2:.2f}" y="14" {font} text-anchor="middle">{title}</text>'
        )
    for i, (name, xs, ys) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(float(x)):.2f},{sy(float(y)):.2f}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'
        )
        ly = _Y1 + 14 + 16 * i
        parts.append(
            f'<line x1="{_X1 - 110}" y1="{ly}" x2="{_X1 - 90}" y2="{ly}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(f'<text x="{_X1 - 84}" y="{ly + 4}" {font}>{name}</text>')
    parts.append("</svg>")
    _atomic_write_text(path, "\n".join(parts) + "\n")
