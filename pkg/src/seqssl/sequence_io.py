"""Image sequences, annotations and model files: on-disk formats and subsampling.

On-disk sequence layout (one directory per sequence):
    frame_000000.pgm ... frame_{N-1}.pgm   binary PGM (P5, maxval 255)
    annotations.csv                        header: frame_index,x,y,w,h,label,occluded
    meta.json                              optional, {"fps": <float>}; default 30.0

Model files (``.sslmodel``) start with the 8-byte magic ``SSLMDL01``,
followed by a little-endian uint32 JSON-header length, the UTF-8 JSON
header, the weight vector as little-endian IEEE float64, and the bias as
one more float64.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError

LABEL_PEDESTRIAN = "pedestrian"
LABEL_IGNORE = "ignore"
_LABELS = (LABEL_PEDESTRIAN, LABEL_IGNORE)

_CSV_HEADER = "frame_index,x,y,w,h,label,occluded"
_MODEL_MAGIC = b"SSLMDL01"
_FRAME_RE = re.compile(r"^frame_(\d{6})\.pgm$")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, top-left corner + size, in integer pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"BBox must have positive size, got w={self.w} h={self.h}")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    def area(self) -> int:
        return self.w * self.h

    def iou(self, other: "BBox") -> float:
        ix = min(self.x2, other.x2) - max(self.x, other.x)
        iy = min(self.y2, other.y2) - max(self.y, other.y)
        if ix <= 0 or iy <= 0:
            return 0.0
        inter = ix * iy
        return inter / (self.area() + other.area() - inter)

    def translated(self, dx: int, dy: int) -> "BBox":
        return BBox(self.x + dx, self.y + dy, self.w, self.h)


@dataclass
class Frame:
    """One grayscale frame; pixels are a row-major uint8 array of shape (h, w)."""

    index: int
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise ValueError("Frame pixels must be a non-empty 2-D array")
        if px.dtype != np.uint8:
            raise ValueError(f"Frame pixels must be uint8, got {px.dtype}")
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class Annotation:
    frame_index: int
    bbox: BBox
    label: str = LABEL_PEDESTRIAN
    occluded: bool = False

    def __post_init__(self):
        if self.label not in _LABELS:
            raise ValueError(f"unknown annotation label {self.label!r}")


@dataclass
class ImageSequence:
    """Ordered, contiguously indexed frames plus their annotations."""

    frames: list
    annotations: list = field(default_factory=list)
    fps: float = 30.0

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        for i, fr in enumerate(self.frames):
            if fr.index != i:
                raise ValueError(
                    f"non-contiguous frame indices: expected {i}, got {fr.index}"
                )
        if len({fr.pixels.shape for fr in self.frames}) > 1:
            raise ValueError("all frames in a sequence must share dimensions")
        n = len(self.frames)
        for ann in self.annotations:
            if not 0 <= ann.frame_index < n:
                raise ValueError(
                    f"annotation frame_index {ann.frame_index} outside sequence of {n} frames"
                )

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def annotations_by_frame(self) -> dict:
        out = {i: [] for i in range(self.n_frames)}
        for ann in self.annotations:
            out[ann.frame_index].append(ann)
        return out


# ---------------------------------------------------------------------------
# PGM (P5, maxval 255)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated PGM header")
        return data[start:pos]

    if next_token() != b"P5":
        raise DataFormatError(f"{path}: not a binary PGM (P5) file")
    try:
        w = int(next_token())
        h = int(next_token())
        maxval = int(next_token())
    except ValueError as e:
        raise DataFormatError(f"{path}: bad PGM header: {e}") from e
    if maxval != 255:
        raise DataFormatError(f"{path}: PGM maxval must be 255, got {maxval}")
    if w <= 0 or h <= 0:
        raise DataFormatError(f"{path}: bad PGM dimensions {w}x{h}")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + w * h]
    if len(raster) != w * h:
        raise DataFormatError(f"{path}: PGM raster truncated ({len(raster)} of {w * h} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# Annotations CSV


def _parse_annotation_line(line: str, lineno: int, path) -> Annotation:
    parts = line.split(",")
    if len(parts) != 7:
        raise DataFormatError(
            f"{path}:{lineno}: expected 7 fields ({_CSV_HEADER}), got {len(parts)}"
        )
    try:
        frame_index, x, y, w, h = (int(p) for p in parts[:5])
    except ValueError as e:
        raise DataFormatError(f"{path}:{lineno}: non-integer field: {e}") from e
    label = parts[5].strip()
    if label not in _LABELS:
        raise DataFormatError(f"{path}:{lineno}: unknown label {label!r}")
    occ = parts[6].strip()
    if occ not in ("0", "1"):
        raise DataFormatError(f"{path}:{lineno}: occluded must be 0 or 1, got {occ!r}")
    try:
        bbox = BBox(x, y, w, h)
    except ValueError as e:
        raise DataFormatError(f"{path}:{lineno}: {e}") from e
    return Annotation(frame_index, bbox, label, occ == "1")


def read_annotations_csv(path) -> list:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != _CSV_HEADER:
        raise DataFormatError(f"{path}: first line must be the header {_CSV_HEADER!r}")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        out.append(_parse_annotation_line(line, lineno, path))
    return out


def write_annotations_csv(path, annotations) -> None:
    rows = [_CSV_HEADER]
    for a in annotations:
        b = a.bbox
        rows.append(
            f"{a.frame_index},{b.x},{b.y},{b.w},{b.h},{a.label},{1 if a.occluded else 0}"
        )
    Path(path).write_text("\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# Sequence directories


def load_sequence(dir_path) -> ImageSequence:
    """Load a sequence directory; frames must be frame_000000.pgm .. frame_{N-1}.pgm."""
    d = Path(dir_path)
    if not d.is_dir():
        raise DataFormatError(f"sequence directory not found: {d}")
    indices = {}
    for p in d.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            indices[int(m.group(1))] = p
    if not indices:
        raise DataFormatError(f"{d}: no frame_######.pgm files found")
    n = len(indices)
    missing = sorted(set(range(n)) - set(indices))
    if missing or max(indices) != n - 1:
        raise DataFormatError(
            f"{d}: non-contiguous frame indices (found {sorted(indices)[:8]}...)"
            if n > 8
            else f"{d}: non-contiguous frame indices (found {sorted(indices)})"
        )
    frames = [Frame(i, read_pgm(indices[i])) for i in range(n)]
    ann_path = d / "annotations.csv"
    if not ann_path.exists():
        raise DataFormatError(f"{d}: missing annotations.csv")
    annotations = read_annotations_csv(ann_path)
    fps = 30.0
    meta_path = d / "meta.json"
    if meta_path.exists():
        try:
            fps = float(json.loads(meta_path.read_text())["fps"])
        except (ValueError, KeyError, json.JSONDecodeError) as e:
            raise DataFormatError(f"{meta_path}: bad meta file: {e}") from e
    try:
        return ImageSequence(frames, annotations, fps)
    except ValueError as e:
        raise DataFormatError(f"{d}: {e}") from e


def save_sequence(seq: ImageSequence, dir_path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    for fr in seq.frames:
        write_pgm(d / f"frame_{fr.index:06d}.pgm", fr.pixels)
    write_annotations_csv(d / "annotations.csv", seq.annotations)
    (d / "meta.json").write_text(json.dumps({"fps": seq.fps}) + "\n")


def subsample_fps(seq: ImageSequence, target_fps: float) -> ImageSequence:
    """Keep every stride-th frame (stride = fps/target_fps); re-index from 0."""
    if target_fps > seq.fps:
        raise DataFormatError(
            f"target fps {target_fps} exceeds sequence fps {seq.fps}"
        )
    ratio = seq.fps / target_fps
    stride = int(round(ratio))
    if abs(ratio - stride) > 1e-9 or stride < 1:
        raise DataFormatError(
            f"fps {seq.fps} is not an integer multiple of target fps {target_fps}"
        )
    if stride == 1:
        return ImageSequence(list(seq.frames), list(seq.annotations), target_fps)
    frames = [
        Frame(old // stride, fr.pixels)
        for old, fr in enumerate(seq.frames)
        if old % stride == 0
    ]
    annotations = [
        Annotation(a.frame_index // stride, a.bbox, a.label, a.occluded)
        for a in seq.annotations
        if a.frame_index % stride == 0
    ]
    return ImageSequence(frames, annotations, target_fps)


# ---------------------------------------------------------------------------
# Model files


def save_model(model, path) -> None:
    """Write a LinearModel as magic + JSON header + little-endian float64 payload."""
    weights = np.ascontiguousarray(model.weights, dtype="<f8")
    header = {
        "kind": model.kind,
        "layout_id": int(model.layout_id),
        "n_weights": int(weights.size),
        "meta": model.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MODEL_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(weights.tobytes())
        f.write(struct.pack("<d", float(model.bias)))


def load_model(path):
    from .linear_svm import LinearModel  # local import: avoids a module cycle

    data = Path(path).read_bytes()
    if len(data) < len(_MODEL_MAGIC) + 4:
        raise DataFormatError(f"{path}: truncated model file")
    magic = data[: len(_MODEL_MAGIC)]
    if magic != _MODEL_MAGIC:
        if magic[:6] == _MODEL_MAGIC[:6]:
            raise DataFormatError(
                f"{path}: unsupported model version {magic[6:].decode('ascii', 'replace')}"
            )
        raise DataFormatError(f"{path}: bad magic bytes, not a model file")
    pos = len(_MODEL_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if pos + hlen > len(data):
        raise DataFormatError(f"{path}: truncated model header")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
        kind = header["kind"]
        layout_id = int(header["layout_id"])
        n = int(header["n_weights"])
        meta = header.get("meta", {})
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: bad model header: {e}") from e
    pos += hlen
    need = n * 8 + 8
    if pos + need != len(data):
        raise DataFormatError(
            f"{path}: payload size mismatch (have {len(data) - pos}, need {need})"
        )
    weights = np.frombuffer(data, dtype="<f8", count=n, offset=pos).copy()
    (bias,) = struct.unpack_from("<d", data, pos + n * 8)
    return LinearModel(weights=weights, bias=bias, layout_id=layout_id, kind=kind, meta=meta)
