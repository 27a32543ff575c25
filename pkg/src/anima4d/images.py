"""Binary netpbm and PFM image I/O plus frame manifests.

All byte layouts are fixed so write->read->write round-trips are
byte-identical: PPM/PGM use maxval 255 with a canonical three-line header,
PFM is little-endian float32 with bottom-up rows and scale -1.0.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited token, skipping '#' comments."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise DataFormatError("truncated header")
    return data[start:pos], pos


def _parse_netpbm_header(data: bytes, magic: bytes) -> tuple[int, int, int]:
    tok, pos = _read_token(data, 0)
    if tok != magic:
        raise DataFormatError(f"bad magic {tok!r}, expected {magic!r}")
    w_tok, pos = _read_token(data, pos)
    h_tok, pos = _read_token(data, pos)
    max_tok, pos = _read_token(data, pos)
    try:
        w, h, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError:
        raise DataFormatError("non-integer header field") from None
    if w <= 0 or h <= 0:
        raise DataFormatError(f"nonpositive dimensions {w}x{h}")
    if maxval != 255:
        raise DataFormatError(f"unsupported maxval {maxval}, expected 255")
    return w, h, pos + 1  # single whitespace byte separates header and payload


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """rgb: (H, W, 3) float in [0, 1]; quantized by round(v * 255)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataFormatError(f"expected (H, W, 3), got {rgb.shape}")
    data = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Returns (H, W, 3) float32 in [0, 1]."""
    data = Path(path).read_bytes()
    w, h, pos = _parse_netpbm_header(data, b"P6")
    payload = data[pos:pos + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise DataFormatError(f"payload truncated: {len(payload)} of {3 * w * h} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return pixels.astype(np.float32) / np.float32(255.0)


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """gray: (H, W) float in [0, 1]."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise DataFormatError(f"expected (H, W), got {gray.shape}")
    data = np.rint(np.clip(gray, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, pos = _parse_netpbm_header(data, b"P5")
    payload = data[pos:pos + w * h]
    if len(payload) != w * h:
        raise DataFormatError(f"payload truncated: {len(payload)} of {w * h} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float32) / np.float32(255.0)


def write_pfm(path: str | Path, image: np.ndarray) -> None:
    """image: (H, W) or (H, W, 3) float32; stored bottom-up, little-endian."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        magic = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"PF"
    else:
        raise DataFormatError(f"expected (H, W) or (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n-1.0\n" % (w, h))
        f.write(np.ascontiguousarray(image[::-1]).astype("<f4").tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tok, pos = _read_token(data, 0)
    if tok == b"Pf":
        channels = 1
    elif tok == b"PF":
        channels = 3
    else:
        raise DataFormatError(f"bad magic {tok!r}, expected b'Pf' or b'PF'")
    w_tok, pos = _read_token(data, pos)
    h_tok, pos = _read_token(data, pos)
    scale_tok, pos = _read_token(data, pos)
    try:
        w, h, scale = int(w_tok), int(h_tok), float(scale_tok)
    except ValueError:
        raise DataFormatError("malformed header field") from None
    if w <= 0 or h <= 0:
        raise DataFormatError(f"nonpositive dimensions {w}x{h}")
    if scale >= 0:
        raise DataFormatError("big-endian PFM is not supported (scale must be negative)")
    pos += 1
    count = w * h * channels
    payload = data[pos:pos + 4 * count]
    if len(payload) != 4 * count:
        raise DataFormatError(f"payload truncated: {len(payload)} of {4 * count} bytes")
    pixels = np.frombuffer(payload, dtype="<f4").reshape(
        (h, w) if channels == 1 else (h, w, 3))
    return np.ascontiguousarray(pixels[::-1])


@dataclass(frozen=True)
class FrameRecord:
    """One rendered frame. The record carries the full camera so a frame
    directory plus its manifest is self-contained for re-evaluation."""
    index: int
    polar_deg: float
    azimuth_deg: float
    radius: float
    fov_deg: float
    time: float


def write_manifest(path: str | Path, records: list[FrameRecord]) -> None:
    lines = ["# index polar_deg azimuth_deg radius fov_deg time"]
    for r in records:
        lines.append(f"{r.index} {r.polar_deg!r} {r.azimuth_deg!r} {r.radius!r} "
                     f"{r.fov_deg!r} {r.time!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> list[FrameRecord]:
    records = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise DataFormatError(f"manifest line {lineno}: expected 6 fields, got {len(parts)}")
        try:
            records.append(FrameRecord(int(parts[0]), float(parts[1]), float(parts[2]),
                                       float(parts[3]), float(parts[4]), float(parts[5])))
        except ValueError:
            raise DataFormatError(f"manifest line {lineno}: malformed number") from None
    return records
