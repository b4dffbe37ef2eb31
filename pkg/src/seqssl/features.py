"""Dense per-frame feature channels and window descriptors.

Channels are computed on a mirror-padded copy of the frame (half a model
window per side, rounded up to whole cells) so windows overhanging the
frame border remain scoreable. All channel grids share the same cell
lattice; per-cell vectors are:

    grad_hist  36  2x2-cell blocks of 9-bin gradient-orientation histograms,
                   L2-normalized, anchored at the block's top-left cell
    lbp_hist   59  uniform LBP(8,1) histogram, L1-sqrt normalized
    flow_hist  10  9 flow-orientation bins (magnitude-weighted) + 1 magnitude
                   bin, L2-normalized

Window coordinates are in frame pixels (the mirrored margin is reachable
with negative coordinates) and must be aligned to the cell grid.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, NumericError
from .sequence_io import BBox, Frame

GRAD_BINS = 9
LBP_BINS = 59
FLOW_BINS = 10
_NORM_EPS = 1e-6

CHANNEL_DIMS = {"grad_hist": 36, "lbp_hist": LBP_BINS, "flow_hist": FLOW_BINS}


@dataclass(frozen=True)
class ChannelConfig:
    """Which channels to compute and the window/cell geometry they serve."""

    channels: tuple = ("grad_hist", "lbp_hist")
    cell_size: int = 8
    window_w: int = 64
    window_h: int = 128
    flow_search_radius: int = 4

    def __post_init__(self):
        if not self.channels:
            raise ValueError("at least one channel required")
        for name in self.channels:
            if name not in CHANNEL_DIMS:
                raise ValueError(f"unknown channel {name!r}")
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("duplicate channel names")
        if self.cell_size < 4:
            raise ValueError("cell_size must be >= 4")
        if self.window_w % self.cell_size or self.window_h % self.cell_size:
            raise ValueError("window size must be a multiple of cell_size")
        if self.window_w < self.cell_size * 2 or self.window_h < self.cell_size * 2:
            raise ValueError("window must span at least 2 cells per axis")

    @property
    def window_cells(self) -> tuple:
        return (self.window_h // self.cell_size, self.window_w // self.cell_size)

    @property
    def pad(self) -> tuple:
        """(pad_y, pad_x) in pixels: half a window, rounded up to whole cells."""
        c = self.cell_size
        return (
            math.ceil(self.window_h / (2 * c)) * c,
            math.ceil(self.window_w / (2 * c)) * c,
        )

    def channel_window_extent(self, name: str) -> tuple:
        """Cell extent (rows, cols) a window covers in channel `name`'s grid."""
        wch, wcw = self.window_cells
        if name == "grad_hist":
            return (wch - 1, wcw - 1)  # block anchors
        return (wch, wcw)

    def descriptor_length(self) -> int:
        total = 0
        for name in self.channels:
            eh, ew = self.channel_window_extent(name)
            total += eh * ew * CHANNEL_DIMS[name]
        return total

    def layout_id(self) -> int:
        parts = [f"win={self.window_w}x{self.window_h}", f"cell={self.cell_size}"]
        parts += [f"{n}:{CHANNEL_DIMS[n]}" for n in self.channels]
        return zlib.crc32(";".join(parts).encode("ascii"))

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "cell_size": self.cell_size,
            "window_w": self.window_w,
            "window_h": self.window_h,
            "flow_search_radius": self.flow_search_radius,
        }

    @staticmethod
    def from_dict(d: dict) -> "ChannelConfig":
        return ChannelConfig(
            channels=tuple(d["channels"]),
            cell_size=int(d["cell_size"]),
            window_w=int(d["window_w"]),
            window_h=int(d["window_h"]),
            flow_search_radius=int(d.get("flow_search_radius", 4)),
        )


@dataclass
class FlowField:
    """Per-block pixel displacement from the previous to the current frame."""

    u: np.ndarray
    v: np.ndarray
    block_size: int

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("u and v must be 2-D arrays of the same shape")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise NumericError("flow field contains non-finite values")


@dataclass
class FeatureChannels:
    """Per-frame channel grids on a shared padded cell lattice.

    grids maps channel name -> float32 array of shape (ncy, ncx, dim);
    the grad_hist grid is block-anchored with a zeroed last row/column so
    every grid shares the lattice shape.
    """

    frame_index: int
    scale: float
    cell_size: int
    pad: tuple
    grids: dict
    config: ChannelConfig

    @property
    def lattice_shape(self) -> tuple:
        g = next(iter(self.grids.values()))
        return g.shape[:2]

    @property
    def planes(self) -> list:
        """Flat list of 2-D views, one per channel dimension (spec view)."""
        return [g[:, :, d] for g in self.grids.values() for d in range(g.shape[2])]


@dataclass
class Descriptor:
    values: np.ndarray
    layout_id: int

    def __post_init__(self):
        self.values = np.asarray(self.values)


# ---------------------------------------------------------------------------
# Image helpers


def as_pixels(frame) -> np.ndarray:
    return np.asarray(getattr(frame, "pixels", frame))


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-aligned bilinear resample to (out_h, out_w), float32."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape
    if (out_h, out_w) == (h, w):
        return img.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)[None, :]
    top = img[y0[:, None], x0] * (1 - fx) + img[y0[:, None], x1] * fx
    bot = img[y1[:, None], x0] * (1 - fx) + img[y1[:, None], x1] * fx
    return top * (1 - fy) + bot * fy


# ---------------------------------------------------------------------------
# Gradient-orientation channel

def _grad_cell_hist(padded: np.ndarray, ncy: int, ncx: int, cell: int) -> np.ndarray:
    img = padded[: ncy * cell, : ncx * cell].astype(np.float32)
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx) % np.pi  # unsigned orientation in [0, pi)
    pos = ang * (GRAD_BINS / np.pi) - 0.5  # bin centers at (i+0.5)*20deg
    lo = np.floor(pos)
    frac = (pos - lo).astype(np.float32)
    lo = lo.astype(np.int64) % GRAD_BINS
    hi = (lo + 1) % GRAD_BINS
    cy = np.arange(ncy * cell) // cell
    cx = np.arange(ncx * cell) // cell
    cell_id = cy[:, None] * ncx + cx[None, :]
    base = cell_id * GRAD_BINS
    n = ncy * ncx * GRAD_BINS
    hist = np.bincount((base + lo).ravel(), weights=(mag * (1 - frac)).ravel(), minlength=n)
    hist += np.bincount((base + hi).ravel(), weights=(mag * frac).ravel(), minlength=n)
    return hist.reshape(ncy, ncx, GRAD_BINS)


def _grad_block_grid(padded: np.ndarray, ncy: int, ncx: int, cell: int) -> np.ndarray:
    h = _grad_cell_hist(padded, ncy, ncx, cell)
    # 2x2-cell blocks, cells row-major within the block, bins fastest
    blocks = np.concatenate(
        [h[:-1, :-1], h[:-1, 1:], h[1:, :-1], h[1:, 1:]], axis=2
    )
    norm = np.sqrt(np.sum(blocks * blocks, axis=2) + _NORM_EPS * _NORM_EPS)
    blocks /= norm[:, :, None]
    out = np.zeros((ncy, ncx, 36), dtype=np.float32)
    out[: ncy - 1, : ncx - 1] = blocks
    return out


# ---------------------------------------------------------------------------
# Uniform LBP(8,1) channel

def _build_lbp_table() -> np.ndarray:
    table = np.full(256, LBP_BINS - 1, dtype=np.int64)  # non-uniform bucket
    label = 0
    for code in range(256):
        bits = [(code >> i) & 1 for i in range(8)]
        transitions = sum(bits[i] != bits[(i + 1) % 8] for i in range(8))
        if transitions <= 2:
            table[code] = label
            label += 1
    assert label == LBP_BINS - 1
    return table


_LBP_TABLE = _build_lbp_table()
# neighbor offsets (dy, dx), bit i = neighbor i >= center; E,NE,N,NW,W,SW,S,SE
LBP_NEIGHBORS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))


def lbp_codes(img: np.ndarray) -> np.ndarray:
    """Raw LBP(8,1) codes per pixel, replicate border sampling."""
    img = np.asarray(img)
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    code = np.zeros((h, w), dtype=np.int64)
    for bit, (dy, dx) in enumerate(LBP_NEIGHBORS):
        nb = p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        code |= (nb >= img).astype(np.int64) << bit
    return code


def _lbp_cell_grid(padded: np.ndarray, ncy: int, ncx: int, cell: int) -> np.ndarray:
    img = padded[: ncy * cell, : ncx * cell]
    labels = _LBP_TABLE[lbp_codes(img)]
    cy = np.arange(ncy * cell) // cell
    cx = np.arange(ncx * cell) // cell
    cell_id = cy[:, None] * ncx + cx[None, :]
    idx = cell_id * LBP_BINS + labels
    n = ncy * ncx * LBP_BINS
    hist = np.bincount(idx.ravel(), minlength=n).astype(np.float32)
    hist = hist.reshape(ncy, ncx, LBP_BINS)
    return np.sqrt(hist / float(cell * cell))


# ---------------------------------------------------------------------------
# Flow-histogram channel

def _flow_cell_grid(
    flow: FlowField, ncy: int, ncx: int, cell: int, pad: tuple
) -> np.ndarray:
    pad_y, pad_x = pad
    # cell centers in unpadded frame coordinates -> flow block indices
    cyc = np.arange(ncy) * cell + cell / 2.0 - pad_y
    cxc = np.arange(ncx) * cell + cell / 2.0 - pad_x
    bs = flow.block_size
    by = np.clip((cyc // bs).astype(np.int64), 0, flow.u.shape[0] - 1)
    bx = np.clip((cxc // bs).astype(np.int64), 0, flow.u.shape[1] - 1)
    u = flow.u[by[:, None], bx[None, :]]
    v = flow.v[by[:, None], bx[None, :]]
    mag = np.hypot(u, v)
    nbins = FLOW_BINS - 1
    ang = np.arctan2(v, u) % (2 * np.pi)
    pos = ang * (nbins / (2 * np.pi)) - 0.5
    lo = np.floor(pos)
    frac = (pos - lo).astype(np.float32)
    lo = lo.astype(np.int64) % nbins
    hi = (lo + 1) % nbins
    out = np.zeros((ncy, ncx, FLOW_BINS), dtype=np.float32)
    rows = np.arange(ncy)[:, None] * np.ones(ncx, dtype=np.int64)
    cols = np.ones(ncy, dtype=np.int64)[:, None] * np.arange(ncx)
    out[rows, cols, lo] += mag * (1 - frac)
    out[rows, cols, hi] += mag * frac
    out[:, :, nbins] = mag
    norm = np.sqrt(np.sum(out * out, axis=2) + _NORM_EPS * _NORM_EPS)
    return out / norm[:, :, None]


# ---------------------------------------------------------------------------
# Public operations

def compute_channels(
    frame, config: ChannelConfig, flow: FlowField = None,
    frame_index: int = None, scale: float = 1.0,
) -> FeatureChannels:
    """Compute all configured channel grids for one frame (or pixel array)."""
    px = as_pixels(frame)
    if px.ndim != 2:
        raise DataFormatError("expected a 2-D grayscale frame")
    h, w = px.shape
    cell = config.cell_size
    if h < cell or w < cell:
        raise DataFormatError(f"frame {w}x{h} smaller than one {cell}px cell")
    if "flow_hist" in config.channels and flow is None:
        raise DataFormatError("flow_hist channel requires a FlowField argument")
    pad_y, pad_x = config.pad
    padded = np.pad(px.astype(np.float32), ((pad_y, pad_y), (pad_x, pad_x)), mode="symmetric")
    ncy = padded.shape[0] // cell
    ncx = padded.shape[1] // cell
    grids = {}
    for name in config.channels:
        if name == "grad_hist":
            grids[name] = _grad_block_grid(padded, ncy, ncx, cell)
        elif name == "lbp_hist":
            grids[name] = _lbp_cell_grid(padded, ncy, ncx, cell)
        else:
            grids[name] = _flow_cell_grid(flow, ncy, ncx, cell, (pad_y, pad_x))
    if frame_index is None:
        frame_index = getattr(frame, "index", 0)
    return FeatureChannels(frame_index, scale, cell, (pad_y, pad_x), grids, config)


def extract_descriptor(channels: FeatureChannels, window: BBox) -> Descriptor:
    """Fixed-order window descriptor: channel-major, then row-major cells.

    Window coordinates are frame pixels; the mirrored margin is addressable
    down to -pad. The window must be cell-aligned (the detector's stride
    guarantees this).
    """
    cfg = channels.config
    cell = channels.cell_size
    pad_y, pad_x = channels.pad
    if window.w != cfg.window_w or window.h != cfg.window_h:
        raise DataFormatError(
            f"window {window.w}x{window.h} does not match model window "
            f"{cfg.window_w}x{cfg.window_h}"
        )
    px0 = window.x + pad_x
    py0 = window.y + pad_y
    if px0 % cell or py0 % cell:
        raise DataFormatError(f"window at ({window.x},{window.y}) not cell-aligned")
    cx0 = px0 // cell
    cy0 = py0 // cell
    ncy, ncx = channels.lattice_shape
    wch, wcw = cfg.window_cells
    if cx0 < 0 or cy0 < 0 or cx0 + wcw > ncx or cy0 + wch > ncy:
        raise DataFormatError(f"window at ({window.x},{window.y}) outside padded plane")
    parts = []
    for name in cfg.channels:
        eh, ew = cfg.channel_window_extent(name)
        parts.append(channels.grids[name][cy0 : cy0 + eh, cx0 : cx0 + ew].ravel())
    return Descriptor(np.concatenate(parts), cfg.layout_id())


def compute_flow(prev, curr, block_size: int, search_radius: int) -> FlowField:
    """Block-matching flow: per-block integer displacement minimizing SAD.

    Ties break toward the smallest displacement magnitude, then
    lexicographically by (du, dv). Blocks tile the frame; displacements
    pushing a block outside the frame are not considered for it.
    """
    a = as_pixels(prev)
    b = as_pixels(curr)
    if a.shape != b.shape:
        raise DataFormatError(f"frame size mismatch: {a.shape} vs {b.shape}")
    if block_size < 4:
        raise ValueError("block_size must be >= 4")
    if search_radius < 1:
        raise ValueError("search_radius must be >= 1")
    a = a.astype(np.int32)
    b = b.astype(np.int32)
    h, w = a.shape
    bs = block_size
    nby, nbx = h // bs, w // bs
    if nby == 0 or nbx == 0:
        raise DataFormatError(f"frame {w}x{h} smaller than one {bs}px block")

    r = search_radius
    shifts = sorted(
        ((du, dv) for du in range(-r, r + 1) for dv in range(-r, r + 1)),
        key=lambda s: (s[0] * s[0] + s[1] * s[1], s[0], s[1]),
    )
    best_sad = np.full((nby, nbx), np.iinfo(np.int64).max, dtype=np.int64)
    best_u = np.zeros((nby, nbx), dtype=np.float32)
    best_v = np.zeros((nby, nbx), dtype=np.float32)
    for du, dv in shifts:
        bx_lo = max(0, (-du + bs - 1) // bs) if du < 0 else 0
        bx_hi = min(nbx - 1, (w - du) // bs - 1)
        by_lo = max(0, (-dv + bs - 1) // bs) if dv < 0 else 0
        by_hi = min(nby - 1, (h - dv) // bs - 1)
        if bx_lo > bx_hi or by_lo > by_hi:
            continue
        y0, y1 = by_lo * bs, (by_hi + 1) * bs
        x0, x1 = bx_lo * bs, (bx_hi + 1) * bs
        diff = np.abs(a[y0:y1, x0:x1] - b[y0 + dv : y1 + dv, x0 + du : x1 + du])
        sad = diff.reshape(by_hi - by_lo + 1, bs, bx_hi - bx_lo + 1, bs).sum(axis=(1, 3))
        view = best_sad[by_lo : by_hi + 1, bx_lo : bx_hi + 1]
        better = sad < view
        view[better] = sad[better]
        best_u[by_lo : by_hi + 1, bx_lo : bx_hi + 1][better] = du
        best_v[by_lo : by_hi + 1, bx_lo : bx_hi + 1][better] = dv
    return FlowField(best_u, best_v, bs)


def zero_flow(frame_shape: tuple, block_size: int) -> FlowField:
    nby = frame_shape[0] // block_size
    nbx = frame_shape[1] // block_size
    z = np.zeros((nby, nbx), dtype=np.float32)
    return FlowField(z, z.copy(), block_size)


def _block_center_range(lo_px: float, size_px: int, bs: int, n_blocks: int) -> tuple:
    """Inclusive block-index range whose centers lie in [lo_px, lo_px+size_px)."""
    b_lo = math.ceil((lo_px - bs / 2.0) / bs)
    b_hi = math.ceil((lo_px + size_px - bs / 2.0) / bs) - 1
    return max(0, b_lo), min(n_blocks - 1, b_hi)


def mean_flow_in_window(flow: FlowField, window: BBox) -> tuple:
    """Mean (du, dv) over blocks whose centers fall inside the window."""
    bs = flow.block_size
    nby, nbx = flow.u.shape
    by_lo, by_hi = _block_center_range(window.y, window.h, bs, nby)
    bx_lo, bx_hi = _block_center_range(window.x, window.w, bs, nbx)
    if by_lo > by_hi or bx_lo > bx_hi:
        return (0.0, 0.0)
    u = flow.u[by_lo : by_hi + 1, bx_lo : bx_hi + 1].astype(np.float64)
    v = flow.v[by_lo : by_hi + 1, bx_lo : bx_hi + 1].astype(np.float64)
    return (float(u.mean()), float(v.mean()))


class FlowIntegral:
    """Summed-area tables over a flow field for batch window means."""

    def __init__(self, flow: FlowField):
        self.block_size = flow.block_size
        self.shape = flow.u.shape
        pad = ((1, 0), (1, 0))
        self.su = np.pad(np.cumsum(np.cumsum(flow.u, 0), 1), pad).astype(np.float64)
        self.sv = np.pad(np.cumsum(np.cumsum(flow.v, 0), 1), pad).astype(np.float64)

    def window_means(self, xs, ys, ws, hs) -> tuple:
        """Vectorized mean_flow_in_window over parallel coordinate arrays."""
        bs = self.block_size
        nby, nbx = self.shape
        by_lo = np.maximum(0, np.ceil((ys - bs / 2.0) / bs)).astype(np.int64)
        by_hi = np.minimum(nby - 1, np.ceil((ys + hs - bs / 2.0) / bs) - 1).astype(np.int64)
        bx_lo = np.maximum(0, np.ceil((xs - bs / 2.0) / bs)).astype(np.int64)
        bx_hi = np.minimum(nbx - 1, np.ceil((xs + ws - bs / 2.0) / bs) - 1).astype(np.int64)
        valid = (by_lo <= by_hi) & (bx_lo <= bx_hi)
        by_lo = np.minimum(by_lo, nby - 1)  # keep rect() indices in range for
        bx_lo = np.minimum(bx_lo, nbx - 1)  # windows fully outside the grid
        by_hi_c = np.where(valid, by_hi, by_lo)
        bx_hi_c = np.where(valid, bx_hi, bx_lo)
        count = (by_hi_c - by_lo + 1) * (bx_hi_c - bx_lo + 1)

        def rect(s):
            return (
                s[by_hi_c + 1, bx_hi_c + 1]
                - s[by_lo, bx_hi_c + 1]
                - s[by_hi_c + 1, bx_lo]
                + s[by_lo, bx_lo]
            )

        with np.errstate(invalid="ignore"):
            mu = np.where(valid, rect(self.su) / count, 0.0)
            mv = np.where(valid, rect(self.sv) / count, 0.0)
        return mu, mv
