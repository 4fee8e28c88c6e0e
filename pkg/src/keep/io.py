"""File formats: KTNS tensors, PPM/PGM frames, Middlebury .flo, landmark CSV,
parameter manifests and flat ``key = value`` config files."""

from __future__ import annotations

import csv
import io as _io
import os
import re
import struct
from pathlib import Path

import numpy as np

from keep.errors import FormatError, KeepIOError

KTNS_MAGIC = b"KTNS"
KTNS_VERSION = 1
FLO_MAGIC = 202021.25
FRAME_PATTERN = re.compile(r"^frame_(\d{6})\.(ppm|pgm)$")


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise KeepIOError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _write_bytes(path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise KeepIOError(f"cannot write {path}: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------------------
# KTNS


def encode_ktns(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = KTNS_MAGIC + struct.pack("<II", KTNS_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_ktns(data: bytes) -> np.ndarray:
    if len(data) < 12 or data[:4] != KTNS_MAGIC:
        raise FormatError("not a KTNS tensor (bad magic)")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != KTNS_VERSION:
        raise FormatError(f"unsupported KTNS version {version}")
    offset = 12 + 4 * ndim
    if len(data) < offset:
        raise FormatError("truncated KTNS header")
    dims = struct.unpack_from(f"<{ndim}I", data, 12)
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(data) != offset + 4 * count:
        raise FormatError(f"KTNS payload size mismatch for dims {dims}")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    return arr.reshape(dims).astype(np.float32)


def write_ktns(path, array) -> None:
    _write_bytes(path, encode_ktns(array))


def read_ktns(path) -> np.ndarray:
    return decode_ktns(_read_bytes(path))


# ---------------------------------------------------------------------------
# PPM / PGM


def _to_bytes8(frame) -> np.ndarray:
    arr = np.asarray(frame, dtype=np.float64)
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pnm(frame) -> bytes:
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if c == 1:
        magic = b"P5"
    elif c == 3:
        magic = b"P6"
    else:
        raise FormatError(f"PPM/PGM needs 1 or 3 channels, got {c}")
    return magic + b"\n%d %d\n255\n" % (w, h) + _to_bytes8(arr).tobytes()


def _pnm_tokens(data: bytes, count: int):
    # header tokens are whitespace separated; '#' starts a comment
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("truncated PPM/PGM header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1  # one whitespace byte ends the header


def decode_pnm(data: bytes) -> np.ndarray:
    tokens, offset = _pnm_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported image magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("non-integer PPM/PGM header field") from exc
    if maxval != 255:
        raise FormatError(f"only 8-bit images supported (maxval {maxval})")
    c = 3 if magic == b"P6" else 1
    n = w * h * c
    if len(data) < offset + n:
        raise FormatError("truncated PPM/PGM payload")
    pixels = np.frombuffer(data, dtype=np.uint8, count=n, offset=offset)
    return pixels.reshape(h, w, c).astype(np.float64) / 255.0


def write_frame(path, frame) -> None:
    _write_bytes(path, encode_pnm(frame))


def read_frame(path) -> np.ndarray:
    return decode_pnm(_read_bytes(path))


def frame_name(index: int, channels: int) -> str:
    return f"frame_{index:06d}.{'pgm' if channels == 1 else 'ppm'}"


def list_frames(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise KeepIOError(f"frame directory not found: {directory}")
    paths = sorted(p for p in d.iterdir() if FRAME_PATTERN.match(p.name))
    if not paths:
        raise KeepIOError(f"no frame_NNNNNN.ppm/pgm files in {directory}")
    return paths


def read_frames(directory) -> list[np.ndarray]:
    return [read_frame(p) for p in list_frames(directory)]


def write_frames(directory, frames) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames, start=1):
        f = np.asarray(f)
        p = d / frame_name(i, 1 if f.ndim == 2 else f.shape[2])
        write_frame(p, f)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# Middlebury .flo


def encode_flo(flow) -> bytes:
    arr = np.asarray(flow, dtype="<f4")
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise FormatError(f"flow must be (H, W, 2), got {arr.shape}")
    h, w = arr.shape[:2]
    return struct.pack("<fii", FLO_MAGIC, w, h) + np.ascontiguousarray(arr).tobytes()


def decode_flo(data: bytes) -> np.ndarray:
    if len(data) < 12:
        raise FormatError("truncated .flo header")
    magic, w, h = struct.unpack_from("<fii", data, 0)
    if magic != FLO_MAGIC:
        raise FormatError(f"bad .flo magic {magic}")
    if w <= 0 or h <= 0 or len(data) != 12 + 8 * w * h:
        raise FormatError(f".flo payload does not match {w}x{h}")
    arr = np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=12)
    return arr.reshape(h, w, 2).astype(np.float64)


def write_flo(path, flow) -> None:
    _write_bytes(path, encode_flo(flow))


def read_flo(path) -> np.ndarray:
    return decode_flo(_read_bytes(path))


def flow_name(t: int) -> str:
    """File holding the flow from frame ``t-1`` to frame ``t`` (1-based)."""
    return f"flow_{t:06d}.flo"


# ---------------------------------------------------------------------------
# landmark CSV


def encode_landmarks_csv(points) -> str:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 3 or pts.shape[2] != 2:
        raise FormatError(f"landmarks must be (T, L, 2), got {pts.shape}")
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame", "landmark", "x", "y"])
    for t in range(pts.shape[0]):
        for k in range(pts.shape[1]):
            writer.writerow([t, k, repr(float(pts[t, k, 0])), repr(float(pts[t, k, 1]))])
    return buf.getvalue()


def decode_landmarks_csv(text: str) -> np.ndarray:
    reader = csv.reader(_io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["frame", "landmark", "x", "y"]:
        raise FormatError("landmark CSV must start with header frame,landmark,x,y")
    rows = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            t, k, x, y = int(row[0]), int(row[1]), float(row[2]), float(row[3])
        except (ValueError, IndexError) as exc:
            raise FormatError(f"bad landmark row at line {lineno}") from exc
        rows[(t, k)] = (x, y)
    if not rows:
        raise FormatError("landmark CSV has no rows")
    frames = sorted({t for t, _ in rows})
    marks = sorted({k for _, k in rows})
    out = np.empty((len(frames), len(marks), 2))
    for i, t in enumerate(frames):
        for j, k in enumerate(marks):
            if (t, k) not in rows:
                raise FormatError(f"landmark {k} missing in frame {t}")
            out[i, j] = rows[(t, k)]
    return out


def write_landmarks_csv(path, points) -> None:
    _write_bytes(path, encode_landmarks_csv(points).encode())


def read_landmarks_csv(path) -> np.ndarray:
    return decode_landmarks_csv(_read_bytes(path).decode())


# ---------------------------------------------------------------------------
# key = value files (configs and parameter manifests)


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_config(path) -> dict[str, str]:
    return parse_key_values(_read_bytes(path).decode())


def save_params(directory, params: dict[str, np.ndarray], manifest: str = "manifest.txt") -> Path:
    """Write each array as ``<name>.ktns`` plus a ``name = path`` manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(params):
        fname = f"{name}.ktns"
        write_ktns(d / fname, params[name])
        lines.append(f"{name} = {fname}")
    path = d / manifest
    _write_bytes(path, ("\n".join(lines) + "\n").encode())
    return path


def load_params(manifest_path) -> dict[str, np.ndarray]:
    manifest_path = Path(manifest_path)
    entries = read_config(manifest_path)
    base = manifest_path.parent
    return {
        name: read_ktns(rel if os.path.isabs(rel) else base / rel)
        for name, rel in entries.items()
    }
