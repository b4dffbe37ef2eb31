"""Stacked sequential learning over image sequences.

The second-stage classifier consumes, besides the window descriptor, the
base classifier's cached scores over a spatiotemporal neighborhood: T
consecutive frames (past / future / centered around the anchor frame) and
a (2*nx+1) x (2*ny+1) grid of spatial displacements per frame. Temporal
window volumes either keep the window fixed across frames (projection) or
chain it along the block-matching optical flow.

Augmented vectors are ordered frame-major (oldest neighborhood frame
first), then row-major over (row displacement j, column displacement i).
"""

from __future__ import annotations

import heapq
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError, NumericError
from .features import ChannelConfig, Descriptor, FlowIntegral, compute_flow, mean_flow_in_window
from .sequence_io import BBox, LABEL_PEDESTRIAN
from . import linear_svm, scanning


@dataclass(frozen=True)
class FoldPlan:
    """Contiguous partition of the frame range into K folds."""

    K: int
    fold_of_frame: tuple

    def frames_in_fold(self, k: int) -> list:
        return [f for f, fk in enumerate(self.fold_of_frame) if fk == k]

    def frames_not_in_fold(self, k: int) -> list:
        return [f for f, fk in enumerate(self.fold_of_frame) if fk != k]


def make_fold_plan(seq, K: int) -> FoldPlan:
    """Split frames into K contiguous near-equal chunks (first chunks larger)."""
    n = seq.n_frames if hasattr(seq, "n_frames") else int(seq)
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > n:
        raise ValueError(f"K={K} exceeds frame count {n}")
    base = n // K
    extra = n % K
    fold_of = []
    for k in range(K):
        size = base + (1 if k < extra else 0)
        fold_of.extend([k] * size)
    return FoldPlan(K, tuple(fold_of))


_STYLES = ("past", "future", "centered")
_MODES = ("projection", "optical_flow")


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Spatiotemporal neighborhood geometry for score gathering."""

    nx: int = 3
    ny: int = 3
    step: tuple = None  # (dx, dy) pixels at reference scale; None -> feature stride
    T: int = 5
    temporal_style: str = "past"
    volume_mode: str = "projection"
    out_of_grid_score: float = -1.0

    def __post_init__(self):
        if self.nx < 0 or self.ny < 0:
            raise ValueError("nx and ny must be >= 0")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.temporal_style not in _STYLES:
            raise ValueError(f"temporal_style must be one of {_STYLES}")
        if self.volume_mode not in _MODES:
            raise ValueError(f"volume_mode must be one of {_MODES}")
        if self.temporal_style == "centered" and self.T % 2 == 0:
            raise ValueError("centered style requires odd T")

    @property
    def n_scores(self) -> int:
        return (2 * self.nx + 1) * (2 * self.ny + 1) * self.T

    @property
    def frame_offsets(self) -> tuple:
        """Offsets from the anchor frame, oldest first; contains 0."""
        if self.temporal_style == "past":
            return tuple(range(-self.T + 1, 1))
        if self.temporal_style == "future":
            return tuple(range(0, self.T))
        half = self.T // 2
        return tuple(range(-half, half + 1))

    @property
    def anchor_index(self) -> int:
        return self.frame_offsets.index(0)

    def grid_steps(self, cell_size: int) -> tuple:
        """Spatial displacement step in grid units (sy, sx)."""
        step = self.step if self.step is not None else (cell_size, cell_size)
        dx, dy = int(step[0]), int(step[1])
        if dx % cell_size or dy % cell_size or dx <= 0 or dy <= 0:
            raise ConfigError(
                f"neighborhood step {step} must be positive multiples of the "
                f"{cell_size}px feature stride"
            )
        return dy // cell_size, dx // cell_size

    def to_dict(self) -> dict:
        return {
            "nx": self.nx,
            "ny": self.ny,
            "step": list(self.step) if self.step is not None else None,
            "T": self.T,
            "temporal_style": self.temporal_style,
            "volume_mode": self.volume_mode,
            "out_of_grid_score": self.out_of_grid_score,
        }

    @staticmethod
    def from_dict(d: dict) -> "NeighborhoodSpec":
        step = d.get("step")
        return NeighborhoodSpec(
            nx=int(d["nx"]),
            ny=int(d["ny"]),
            step=tuple(step) if step is not None else None,
            T=int(d["T"]),
            temporal_style=d["temporal_style"],
            volume_mode=d["volume_mode"],
            out_of_grid_score=float(d.get("out_of_grid_score", -1.0)),
        )


def augmented_layout_id(channel_cfg: ChannelConfig, spec: NeighborhoodSpec) -> int:
    s = (
        f"{channel_cfg.layout_id()};nbhd={spec.nx},{spec.ny},{spec.T},"
        f"{spec.temporal_style},{spec.volume_mode},{spec.step}"
    )
    return zlib.crc32(s.encode("ascii"))


@dataclass
class WindowTrack:
    """Window positions across the neighborhood frames, oldest first."""

    windows: list
    frame_indices: list
    mode: str

    def __post_init__(self):
        if len(self.windows) != len(self.frame_indices):
            raise ValueError("windows and frame_indices must be parallel")
        if self.mode == "projection" and len({(b.x, b.y, b.w, b.h) for b in self.windows}) > 1:
            raise ValueError("projection tracks must keep the window fixed")


@dataclass
class AugmentedSample:
    base_descriptor: Descriptor
    neighbor_scores: np.ndarray
    label: int

    def __post_init__(self):
        self.neighbor_scores = np.asarray(self.neighbor_scores, dtype=np.float64)
        if not np.isfinite(self.neighbor_scores).all():
            raise NumericError("neighbor scores must be finite")

    def vector(self) -> np.ndarray:
        return np.concatenate(
            [self.base_descriptor.values.astype(np.float64), self.neighbor_scores]
        )


def build_track(
    window: BBox,
    frame_index: int,
    spec: NeighborhoodSpec,
    flows: list = None,
    n_frames: int = None,
) -> WindowTrack:
    """Window volume for one anchor: fixed (projection) or flow-chained windows.

    `flows[i]` is the flow field between frames i-1 and i; only consulted in
    optical_flow mode. Frames beyond the sequence boundary are clamped
    (repeating the boundary frame); clamped steps carry no translation.
    """
    last = None if n_frames is None else n_frames - 1
    frames = []
    for off in spec.frame_offsets:
        f = max(frame_index + off, 0)
        if last is not None:
            f = min(f, last)
        frames.append(f)
    a = spec.anchor_index
    windows = [None] * len(frames)
    windows[a] = window
    if spec.volume_mode == "projection":
        return WindowTrack([window] * len(frames), frames, spec.volume_mode)
    if flows is None:
        raise ValueError("optical_flow tracks require per-frame flow fields")
    for i in range(a - 1, -1, -1):  # backward chaining
        src, dst = frames[i + 1], frames[i]
        cur = windows[i + 1]
        if dst == src:
            windows[i] = cur
        else:
            mu, mv = mean_flow_in_window(flows[src], cur)
            windows[i] = cur.translated(-int(np.round(mu)), -int(np.round(mv)))
    for i in range(a + 1, len(frames)):  # forward chaining
        src, dst = frames[i - 1], frames[i]
        cur = windows[i - 1]
        if dst == src:
            windows[i] = cur
        else:
            mu, mv = mean_flow_in_window(flows[dst], cur)
            windows[i] = cur.translated(int(np.round(mu)), int(np.round(mv)))
    return WindowTrack(windows, frames, spec.volume_mode)


def gather_neighbor_scores(
    track: WindowTrack,
    spec: NeighborhoodSpec,
    store: scanning.ScoreMapStore,
    channel_cfg: ChannelConfig,
    level: int,
    anchor_gy: int,
    anchor_gx: int,
) -> np.ndarray:
    """Neighborhood score vector for one candidate, read from cached maps.

    Displacements are applied in the score grid of the candidate's own
    pyramid level; positions falling outside a grid are filled with
    spec.out_of_grid_score.
    """
    cell = channel_cfg.cell_size
    sgy, sgx = spec.grid_steps(cell)
    anchor_win = track.windows[spec.anchor_index]
    fill = spec.out_of_grid_score
    out = np.empty(spec.n_scores, dtype=np.float64)
    pos = 0
    for t, f in enumerate(track.frame_indices):
        m = store.get(f, level)
        grid = m.grid
        gh, gw = grid.shape
        win = track.windows[t]
        dgy = int(np.round((win.y - anchor_win.y) * m.scale / cell))
        dgx = int(np.round((win.x - anchor_win.x) * m.scale / cell))
        cy = anchor_gy + dgy
        cx = anchor_gx + dgx
        for j in range(-spec.ny, spec.ny + 1):
            r = cy + j * sgy
            for i in range(-spec.nx, spec.nx + 1):
                c = cx + i * sgx
                out[pos] = grid[r, c] if 0 <= r < gh and 0 <= c < gw else fill
                pos += 1
    return out


def gather_batch(
    spec: NeighborhoodSpec,
    store: scanning.ScoreMapStore,
    channel_cfg: ChannelConfig,
    track_frames: list,
    levels: np.ndarray,
    gys: np.ndarray,
    gxs: np.ndarray,
    deltas: list = None,
) -> np.ndarray:
    """Vectorized gather for many candidates sharing one anchor frame.

    `deltas`, when given (optical_flow mode), holds per track frame a pair
    of image-pixel displacement arrays (dx, dy) relative to the anchor
    windows; grid conversion happens per level here.
    """
    cell = channel_cfg.cell_size
    sgy, sgx = spec.grid_steps(cell)
    n = len(levels)
    q0 = (2 * spec.nx + 1) * (2 * spec.ny + 1)
    out = np.full((n, spec.n_scores), spec.out_of_grid_score, dtype=np.float64)
    j_off = np.arange(-spec.ny, spec.ny + 1) * sgy
    i_off = np.arange(-spec.nx, spec.nx + 1) * sgx
    for t, f in enumerate(track_frames):
        for li in np.unique(levels):
            m = store.get(f, int(li))
            grid = m.grid
            gh, gw = grid.shape
            sel = np.nonzero(levels == li)[0]
            cy = gys[sel]
            cx = gxs[sel]
            if deltas is not None:
                dx, dy = deltas[t]
                cy = cy + np.round(dy[sel] * m.scale / cell).astype(np.int64)
                cx = cx + np.round(dx[sel] * m.scale / cell).astype(np.int64)
            rows = cy[:, None] + j_off[None, :]
            cols = cx[:, None] + i_off[None, :]
            valid = ((rows >= 0) & (rows < gh))[:, :, None] & (
                (cols >= 0) & (cols < gw)
            )[:, None, :]
            vals = grid[
                np.clip(rows, 0, gh - 1)[:, :, None],
                np.clip(cols, 0, gw - 1)[:, None, :],
            ]
            block = np.where(valid, vals, spec.out_of_grid_score)
            out[sel, t * q0 : (t + 1) * q0] = block.reshape(len(sel), q0)
    return out


def clamped_track_frames(spec: NeighborhoodSpec, frame_index: int, last_available: int) -> list:
    return [min(max(frame_index + off, 0), last_available) for off in spec.frame_offsets]


def flow_track_deltas(
    spec: NeighborhoodSpec,
    flow_integrals: dict,
    track_frames: list,
    xs: np.ndarray,
    ys: np.ndarray,
    ws: np.ndarray,
    hs: np.ndarray,
) -> list:
    """Cumulative integer window displacements per track frame (batch form).

    Mirrors build_track's chaining: backward steps subtract the rounded mean
    flow of the (already translated) window region, forward steps add it.
    """
    n = len(xs)
    a = spec.anchor_index
    deltas = [None] * len(track_frames)
    zero = np.zeros(n, dtype=np.int64)
    deltas[a] = (zero, zero)
    dx, dy = zero, zero
    for i in range(a - 1, -1, -1):
        src, dst = track_frames[i + 1], track_frames[i]
        if dst != src:
            fi = flow_integrals[src]
            mu, mv = fi.window_means(xs + dx, ys + dy, ws, hs)
            dx = dx - np.round(mu).astype(np.int64)
            dy = dy - np.round(mv).astype(np.int64)
        deltas[i] = (dx, dy)
    dx, dy = zero, zero
    for i in range(a + 1, len(track_frames)):
        src, dst = track_frames[i - 1], track_frames[i]
        if dst != src:
            fi = flow_integrals[dst]
            mu, mv = fi.window_means(xs + dx, ys + dy, ws, hs)
            dx = dx + np.round(mu).astype(np.int64)
            dy = dy + np.round(mv).astype(np.int64)
        deltas[i] = (dx, dy)
    return deltas


# ---------------------------------------------------------------------------
# SSL training


def _candidate_bboxes(geometry, channel_cfg, levels, gys, gxs) -> tuple:
    xs = np.empty(len(levels), dtype=np.int64)
    ys = np.empty(len(levels), dtype=np.int64)
    ws = np.empty(len(levels), dtype=np.int64)
    hs = np.empty(len(levels), dtype=np.int64)
    for li in np.unique(levels):
        sel = levels == li
        scale = geometry[li][0]
        x, y, w, h = scanning.grid_to_bbox_arrays(gys[sel], gxs[sel], scale, channel_cfg)
        xs[sel], ys[sel], ws[sel], hs[sel] = x, y, w, h
    return xs, ys, ws, hs


def train_ssl(
    seq,
    svm_cfg: linear_svm.SvmConfig,
    channel_cfg: ChannelConfig,
    spec: NeighborhoodSpec,
    det_cfg: scanning.DetectorConfig = None,
    folds: int = 1,
    base_model: linear_svm.LinearModel = None,
    collector: dict = None,
) -> tuple:
    """Two-stage SSL training; returns (C_B for stage 1, C_SSL for stage 2).

    Per fold, an auxiliary base model is bootstrap-trained on the other
    folds and used to densely score this fold's frames; the cached maps
    provide the neighborhood features. C_SSL is then trained on
    [descriptor || neighbor scores] with hard-negative bootstrapping over
    the stage-1 candidate pool. With folds=1 the single auxiliary model
    doubles as the stage-1 model; a pre-trained one may be passed in to
    train several SSL variants over the same base.
    """
    if det_cfg is None:
        det_cfg = scanning.DetectorConfig()
    plan = make_fold_plan(seq, folds)
    n_frames = seq.n_frames
    aug_layout = augmented_layout_id(channel_cfg, spec)
    need_flow = spec.volume_mode == "optical_flow"

    if folds == 1:
        if base_model is not None:
            if base_model.layout_id != channel_cfg.layout_id():
                raise DataFormatError(
                    "provided base model layout does not match channel config"
                )
            fold_models = [base_model]
        else:
            fold_models = [linear_svm.bootstrap_train(seq, svm_cfg, channel_cfg, det_cfg)]
        c_b = fold_models[0]
    elif base_model is not None:
        raise ValueError("base_model shortcut is only valid with folds=1")
    else:
        fold_models = [
            linear_svm.bootstrap_train(
                seq, svm_cfg, channel_cfg, det_cfg,
                frame_indices=plan.frames_not_in_fold(k),
            )
            for k in range(folds)
        ]
        c_b = linear_svm.bootstrap_train(seq, svm_cfg, channel_cfg, det_cfg)

    fold_kernels = [scanning.model_kernels(m.weights, channel_cfg) for m in fold_models]

    store = scanning.ScoreMapStore(retention=None)
    cand = {}
    cand_ok = {}
    pos_rows, pos_frames, pos_levels, pos_gys, pos_gxs = [], [], [], [], []
    neg_rows = []
    neg_keys = set()
    flow_ints = {}
    scored_total = 0
    cand_total = 0

    for f in range(n_frames):
        k = plan.fold_of_frame[f]
        model_f = fold_models[k]
        prev = seq.frames[f - 1] if f > 0 else None
        scan = scanning.scan_frame(
            seq.frames[f].pixels,
            f,
            fold_kernels[k],
            model_f.bias,
            channel_cfg,
            det_cfg,
            threshold=det_cfg.stage1_threshold,
            prev_frame=prev,
        )
        store.put_frame(f, scan.maps)
        scored_total += scan.scored_windows
        cand_total += len(scan.cand_score)
        cand[f] = (scan.cand_level, scan.cand_gy, scan.cand_gx)
        if need_flow and f > 0:
            flow = compute_flow(
                seq.frames[f - 1], seq.frames[f],
                det_cfg.flow_block_size, det_cfg.flow_search_radius,
            )
            flow_ints[f] = FlowIntegral(flow)
        # positives of this frame
        anchors = linear_svm._positive_anchors(seq, f, scan.geometry, channel_cfg)
        for li, gy, gx in anchors:
            row = scanning.extract_descriptors_at(
                scan.channels[li], np.array([gy]), np.array([gx])
            )[0]
            pos_rows.append(row)
            pos_frames.append(f)
            pos_levels.append(li)
            pos_gys.append(gy)
            pos_gxs.append(gx)
        # negative pool mask: stage-1 candidates clear of annotations
        excl = linear_svm._exclusion_boxes(seq.annotations, f)
        ok = np.ones(len(scan.cand_score), dtype=bool)
        if excl and len(scan.cand_score):
            xs, ys, ws, hs = _candidate_bboxes(
                scan.geometry, channel_cfg, scan.cand_level, scan.cand_gy, scan.cand_gx
            )
            ok = linear_svm._filter_overlaps(xs, ys, ws, hs, excl, linear_svm.NEG_IOU_CUT)
        cand_ok[f] = ok
        # round-0 SSL negatives: per-frame uniform sample of the clear pool
        pool = np.nonzero(ok)[0]
        if len(pool):
            rng = np.random.default_rng([svm_cfg.seed, 23, f])
            take = min(svm_cfg.neg_per_frame, len(pool))
            chosen = np.sort(rng.choice(pool, size=take, replace=False))
            for li in np.unique(scan.cand_level[chosen]):
                sel = chosen[scan.cand_level[chosen] == li]
                rows = scanning.extract_descriptors_at(
                    scan.channels[li], scan.cand_gy[sel], scan.cand_gx[sel]
                )
                for row, i in zip(rows, sel):
                    key = (f, int(li), int(scan.cand_gy[i]), int(scan.cand_gx[i]))
                    neg_keys.add(key)
                    neg_rows.append((key, row.copy()))
        del scan

    if not pos_rows:
        raise NumericError("train_ssl: no positive annotations in training sequence")
    if not neg_rows:
        raise NumericError("train_ssl: stage-1 produced no negative candidates")

    geometry = scanning.geometry_for(seq.frames[0].pixels.shape, channel_cfg, det_cfg)

    def _augment(frame, levels, gys, gxs, rows):
        """[descriptor || neighbor scores] for candidates anchored at `frame`."""
        track_frames = clamped_track_frames(spec, frame, n_frames - 1)
        deltas = None
        if need_flow:
            xs, ys, ws, hs = _candidate_bboxes(geometry, channel_cfg, levels, gys, gxs)
            deltas = flow_track_deltas(spec, flow_ints, track_frames, xs, ys, ws, hs)
        neigh = gather_batch(
            spec, store, channel_cfg, track_frames, levels, gys, gxs, deltas
        )
        return np.concatenate([np.asarray(rows, dtype=np.float64), neigh], axis=1)

    # assemble positive augmented rows, frame by frame
    pos_aug = []
    pos_frames = np.array(pos_frames)
    pos_levels = np.array(pos_levels)
    pos_gys = np.array(pos_gys)
    pos_gxs = np.array(pos_gxs)
    pos_rows = np.stack(pos_rows)
    for f in np.unique(pos_frames):
        sel = pos_frames == f
        pos_aug.append(
            _augment(int(f), pos_levels[sel], pos_gys[sel], pos_gxs[sel], pos_rows[sel])
        )
    X_pos = np.concatenate(pos_aug)

    neg_aug = []
    neg_by_frame = {}
    for key, row in neg_rows:
        neg_by_frame.setdefault(key[0], []).append((key, row))
    for f in sorted(neg_by_frame):
        items = neg_by_frame[f]
        levels = np.array([k[1] for k, _ in items])
        gys = np.array([k[2] for k, _ in items])
        gxs = np.array([k[3] for k, _ in items])
        rows = np.stack([r for _, r in items])
        neg_aug.append(_augment(f, levels, gys, gxs, rows))
    X_neg = list(np.concatenate(neg_aug))

    meta = {"channels": channel_cfg.to_dict(), "neighborhood": spec.to_dict()}

    def _fit():
        X = np.concatenate([X_pos, np.stack(X_neg)])
        y = np.concatenate([np.ones(len(X_pos)), -np.ones(len(X_neg))])
        w, b = linear_svm.train_matrix(X, y, svm_cfg)
        if collector is not None:
            collector["X_last"] = X
            collector["y_last"] = y
        return linear_svm.LinearModel(w, b, aug_layout, "ssl", meta)

    c_ssl = _fit()

    for _ in range(svm_cfg.bootstrap_rounds):
        if svm_cfg.max_mined <= 0:
            break
        heap = []
        cap = svm_cfg.max_mined
        for f in range(n_frames):
            ok = cand_ok[f]
            levels, gys, gxs = cand[f]
            pool = np.nonzero(ok)[0]
            if not len(pool):
                continue
            levels, gys, gxs = levels[pool], gys[pool], gxs[pool]
            prev = seq.frames[f - 1] if f > 0 else None
            pyr = scanning.build_pyramid(seq.frames[f].pixels, channel_cfg, det_cfg)
            prev_pyr = (
                scanning.build_pyramid(prev.pixels, channel_cfg, det_cfg)
                if prev is not None and "flow_hist" in channel_cfg.channels
                else None
            )
            chans = scanning.compute_pyramid_channels(pyr, channel_cfg, f, prev_pyr)
            rows = np.empty((len(levels), channel_cfg.descriptor_length()), dtype=np.float64)
            for li in np.unique(levels):
                sel = levels == li
                rows[sel] = scanning.extract_descriptors_at(chans[li], gys[sel], gxs[sel])
            aug = _augment(f, levels, gys, gxs, rows)
            scores = linear_svm.score_matrix(c_ssl, aug)
            hard = np.nonzero(scores > svm_cfg.mining_threshold)[0]
            for i in hard:
                key = (f, int(levels[i]), int(gys[i]), int(gxs[i]))
                if key in neg_keys:
                    continue
                entry = (float(scores[i]), tuple(-k for k in key), key, aug[i])
                if len(heap) < cap:
                    heapq.heappush(heap, entry)
                elif entry[:2] > heap[0][:2]:
                    heapq.heappushpop(heap, entry)
        if not heap:
            continue
        for s, _, key, row in sorted(heap, key=lambda e: (-e[0], e[2])):
            neg_keys.add(key)
            X_neg.append(row)
        c_ssl = _fit()

    if collector is not None:
        collector["scored_windows"] = scored_total
        collector["stage1_candidates"] = cand_total
        collector["n_positives"] = len(X_pos)
        collector["fold_models"] = fold_models
    return c_b, c_ssl
