"""Pyramidal dense-window machinery shared by training-time mining and detection.

A model window slides over every pyramid level with a stride of one feature
cell. Scores for all stride-aligned positions form per-level score grids
(ScoreMap); grid coordinates, level coordinates and original-image
coordinates are related by

    level_x = grid_x * cell - pad_x        image_x = level_x / scale

with pad the mirror padding applied by feature computation.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError
from .features import (
    ChannelConfig,
    FeatureChannels,
    compute_channels,
    compute_flow,
    resize_bilinear,
    zero_flow,
    CHANNEL_DIMS,
    as_pixels,
)
from .sequence_io import BBox


@dataclass(frozen=True)
class DetectorConfig:
    """Pyramid geometry, stage thresholds and NMS/flow parameters."""

    scales_per_octave: int = 8
    min_scale: float = 0.0
    max_scale: float = 1.0
    stage1_threshold: float = -1.0
    stage2_threshold: float = -1.0
    nms_iou: float = 0.5
    flow_block_size: int = 8
    flow_search_radius: int = 6

    def __post_init__(self):
        if self.scales_per_octave < 1:
            raise ValueError("scales_per_octave must be >= 1")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError("nms_iou must be in (0, 1)")


@dataclass
class Pyramid:
    """Bilinear image pyramid; levels are (scale, float32 plane), descending."""

    levels: list
    scale_factor: float


@functools.lru_cache(maxsize=64)
def pyramid_geometry(
    frame_shape: tuple,
    channel_cfg: ChannelConfig,
    scales_per_octave: int,
    min_scale: float,
    max_scale: float,
) -> tuple:
    """Per-level (scale, (level_h, level_w), (grid_h, grid_w)) tuples."""
    h, w = frame_shape
    win_w, win_h = channel_cfg.window_w, channel_cfg.window_h
    if h < win_h or w < win_w:
        raise DataFormatError(
            f"frame {w}x{h} smaller than model window {win_w}x{win_h}"
        )
    cell = channel_cfg.cell_size
    pad_y, pad_x = channel_cfg.pad
    wch, wcw = channel_cfg.window_cells
    out = []
    k = 0
    while True:
        scale = 2.0 ** (-k / scales_per_octave)
        lh, lw = int(round(h * scale)), int(round(w * scale))
        if lh < win_h or lw < win_w or scale < min_scale:
            break
        if scale <= max_scale:
            ncy = (lh + 2 * pad_y) // cell
            ncx = (lw + 2 * pad_x) // cell
            out.append((scale, (lh, lw), (ncy - wch + 1, ncx - wcw + 1)))
        k += 1
    if not out:
        raise DataFormatError(
            f"no pyramid levels in scale range [{min_scale}, {max_scale}]"
        )
    return tuple(out)


def geometry_for(frame_shape: tuple, channel_cfg: ChannelConfig, det_cfg: DetectorConfig) -> tuple:
    return pyramid_geometry(
        frame_shape,
        channel_cfg,
        det_cfg.scales_per_octave,
        det_cfg.min_scale,
        det_cfg.max_scale,
    )


def build_pyramid(frame, channel_cfg: ChannelConfig, det_cfg: DetectorConfig = None) -> Pyramid:
    det_cfg = det_cfg or DetectorConfig()
    px = as_pixels(frame).astype(np.float32)
    geo = geometry_for(px.shape, channel_cfg, det_cfg)
    levels = [(scale, resize_bilinear(px, lh, lw)) for scale, (lh, lw), _ in geo]
    return Pyramid(levels, 2.0 ** (-1.0 / det_cfg.scales_per_octave))


def compute_pyramid_channels(
    pyramid: Pyramid,
    channel_cfg: ChannelConfig,
    frame_index: int,
    prev_pyramid: Pyramid = None,
) -> list:
    """FeatureChannels per level; per-level block flow when HOF is configured."""
    out = []
    need_flow = "flow_hist" in channel_cfg.channels
    for li, (scale, plane) in enumerate(pyramid.levels):
        flow = None
        if need_flow:
            if prev_pyramid is None:
                flow = zero_flow(plane.shape, channel_cfg.cell_size)
            else:
                flow = compute_flow(
                    prev_pyramid.levels[li][1].astype(np.uint8),
                    plane.astype(np.uint8),
                    channel_cfg.cell_size,
                    channel_cfg.flow_search_radius,
                )
        out.append(
            compute_channels(plane, channel_cfg, flow, frame_index=frame_index, scale=scale)
        )
    return out


# ---------------------------------------------------------------------------
# Dense scoring


def model_kernels(weights: np.ndarray, channel_cfg: ChannelConfig) -> list:
    """Split a weight vector into per-channel window kernels (eh, ew, dim)."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size != channel_cfg.descriptor_length():
        raise DataFormatError(
            f"weight length {weights.size} does not match descriptor "
            f"length {channel_cfg.descriptor_length()}"
        )
    kernels = []
    pos = 0
    for name in channel_cfg.channels:
        eh, ew = channel_cfg.channel_window_extent(name)
        dim = CHANNEL_DIMS[name]
        n = eh * ew * dim
        kernels.append((name, weights[pos : pos + n].reshape(eh, ew, dim)))
        pos += n
    return kernels


def dense_scores(channels: FeatureChannels, kernels: list, bias: float) -> np.ndarray:
    """Score every stride-aligned window of one level; returns (grid_h, grid_w)."""
    cfg = channels.config
    ncy, ncx = channels.lattice_shape
    wch, wcw = cfg.window_cells
    ny, nx = ncy - wch + 1, ncx - wcw + 1
    out = np.full((ny, nx), bias, dtype=np.float64)
    for name, kern in kernels:
        grid = channels.grids[name]
        kh, kw, _ = kern.shape
        for a in range(kh):
            for b in range(kw):
                out += grid[a : a + ny, b : b + nx] @ kern[a, b]
    return out


def extract_descriptors_at(
    channels: FeatureChannels, gys: np.ndarray, gxs: np.ndarray
) -> np.ndarray:
    """Batch window descriptors at grid anchors, same order as extract_descriptor."""
    cfg = channels.config
    n = len(gys)
    parts = []
    for name in cfg.channels:
        eh, ew = cfg.channel_window_extent(name)
        grid = channels.grids[name]
        rows = gys[:, None] + np.arange(eh)[None, :]
        cols = gxs[:, None] + np.arange(ew)[None, :]
        block = grid[rows[:, :, None], cols[:, None, :]]
        parts.append(block.reshape(n, -1))
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# Coordinate mapping


def grid_to_bbox_arrays(gys, gxs, scale: float, channel_cfg: ChannelConfig) -> tuple:
    """Grid anchors -> integer original-image (x, y, w, h) arrays."""
    cell = channel_cfg.cell_size
    pad_y, pad_x = channel_cfg.pad
    lx = gxs * cell - pad_x
    ly = gys * cell - pad_y
    x = np.round(lx / scale).astype(np.int64)
    y = np.round(ly / scale).astype(np.int64)
    w = int(round(channel_cfg.window_w / scale))
    h = int(round(channel_cfg.window_h / scale))
    return x, y, np.full_like(x, w), np.full_like(y, h)


def grid_to_bbox(gy: int, gx: int, scale: float, channel_cfg: ChannelConfig) -> BBox:
    x, y, w, h = grid_to_bbox_arrays(
        np.array([gy]), np.array([gx]), scale, channel_cfg
    )
    return BBox(int(x[0]), int(y[0]), int(w[0]), int(h[0]))


def bbox_to_grid(
    bbox: BBox, scale: float, channel_cfg: ChannelConfig, grid_shape: tuple
) -> tuple:
    """Nearest stride-aligned grid anchor for a window given in image coords."""
    cell = channel_cfg.cell_size
    pad_y, pad_x = channel_cfg.pad
    cx = (bbox.x + bbox.w / 2.0) * scale + pad_x
    cy = (bbox.y + bbox.h / 2.0) * scale + pad_y
    gx = int(round((cx - channel_cfg.window_w / 2.0) / cell))
    gy = int(round((cy - channel_cfg.window_h / 2.0) / cell))
    gy = min(max(gy, 0), grid_shape[0] - 1)
    gx = min(max(gx, 0), grid_shape[1] - 1)
    return gy, gx


def best_level_for_height(height: int, geometry: tuple, channel_cfg: ChannelConfig) -> int:
    """Pyramid level whose scale best matches window_h / target height."""
    target = channel_cfg.window_h / max(height, 1)
    best, best_err = 0, float("inf")
    for li, (scale, _, _) in enumerate(geometry):
        err = abs(np.log(scale) - np.log(target))
        if err < best_err:
            best, best_err = li, err
    return best


def iou_with_bbox(xs, ys, ws, hs, bbox: BBox) -> np.ndarray:
    """Vectorized IoU of (x, y, w, h) arrays against one box."""
    ix = np.minimum(xs + ws, bbox.x2) - np.maximum(xs, bbox.x)
    iy = np.minimum(ys + hs, bbox.y2) - np.maximum(ys, bbox.y)
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = ws * hs + bbox.area() - inter
    return inter / union


# ---------------------------------------------------------------------------
# Score maps


@dataclass
class ScoreMap:
    """Base-classifier scores for all grid positions of one (frame, level)."""

    frame_index: int
    level: int
    scale: float
    grid: np.ndarray


class ScoreMapStore:
    """Per-(frame, level) score maps with optional ring retention.

    With retention=T the store keeps maps for at most the last T distinct
    frames per level (the detector's memory bound); retention=None keeps
    everything (training-time use).
    """

    def __init__(self, retention: int = None):
        self.retention = retention
        self._maps = {}
        self._frames = []
        self.max_frames_held = 0

    def put_frame(self, frame_index: int, maps: list) -> None:
        for m in maps:
            self._maps[(frame_index, m.level)] = m
        if frame_index not in self._frames:
            self._frames.append(frame_index)
            self._frames.sort()
        self.max_frames_held = max(self.max_frames_held, len(self._frames))

    def evict_before(self, min_frame: int) -> None:
        drop = [f for f in self._frames if f < min_frame]
        for f in drop:
            self._frames.remove(f)
            for key in [k for k in self._maps if k[0] == f]:
                del self._maps[key]

    def enforce_retention(self) -> None:
        if self.retention is not None and len(self._frames) > self.retention:
            keep_from = self._frames[-self.retention]
            self.evict_before(keep_from)

    def frames_held(self) -> list:
        return list(self._frames)

    def has_frame(self, frame_index: int) -> bool:
        return frame_index in self._frames

    def get(self, frame_index: int, level: int) -> ScoreMap:
        try:
            return self._maps[(frame_index, level)]
        except KeyError:
            raise KeyError(
                f"no score map for frame {frame_index} level {level}; "
                "stage-1 scanning must precede stage-2 reads"
            ) from None


@dataclass
class FrameScan:
    """Stage-1 result for one frame: per-level channels, maps and candidates."""

    frame_index: int
    geometry: tuple
    channels: list
    maps: list
    cand_level: np.ndarray
    cand_gy: np.ndarray
    cand_gx: np.ndarray
    cand_score: np.ndarray
    scored_windows: int


def scan_frame(
    frame,
    frame_index: int,
    kernels: list,
    bias: float,
    channel_cfg: ChannelConfig,
    det_cfg: DetectorConfig,
    threshold: float = float("-inf"),
    prev_frame=None,
) -> FrameScan:
    """Dense stage-1 pass over one frame: full score grids + thresholded candidates."""
    px = as_pixels(frame)
    geo = geometry_for(px.shape, channel_cfg, det_cfg)
    pyr = build_pyramid(px, channel_cfg, det_cfg)
    prev_pyr = None
    if prev_frame is not None and "flow_hist" in channel_cfg.channels:
        prev_pyr = build_pyramid(as_pixels(prev_frame), channel_cfg, det_cfg)
    channels = compute_pyramid_channels(pyr, channel_cfg, frame_index, prev_pyr)
    maps = []
    lv, gy, gx, sc = [], [], [], []
    scored = 0
    for li, ch in enumerate(channels):
        grid = dense_scores(ch, kernels, bias)
        scored += grid.size
        maps.append(ScoreMap(frame_index, li, geo[li][0], grid))
        ys, xs = np.nonzero(grid >= threshold)
        if len(ys):
            lv.append(np.full(len(ys), li, dtype=np.int64))
            gy.append(ys)
            gx.append(xs)
            sc.append(grid[ys, xs])
    cat = lambda parts, dt: np.concatenate(parts) if parts else np.empty(0, dtype=dt)
    return FrameScan(
        frame_index,
        geo,
        channels,
        maps,
        cat(lv, np.int64),
        cat(gy, np.int64),
        cat(gx, np.int64),
        cat(sc, np.float64),
        scored,
    )
