"""Two-stage detection pipeline: permissive dense stage 1, SSL re-scoring, NMS last.

Stage 1 scores every stride-aligned window of every pyramid level with the
base model and caches the full score grids; windows above the permissive
stage-1 threshold become candidates. Stage 2 re-scores each candidate with
the SSL model over its spatiotemporal neighborhood and applies the final
threshold; non-maximum suppression runs only on stage-2 survivors. Frames
are processed in temporal order; the score-map store retains at most T
frames per level.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .features import ChannelConfig, FlowIntegral, compute_flow
from .sequence_io import BBox
from .linear_svm import LinearModel, score_matrix
from .scanning import (
    DetectorConfig,
    Pyramid,
    ScoreMap,
    ScoreMapStore,
    build_pyramid,
    extract_descriptors_at,
    geometry_for,
    grid_to_bbox_arrays,
    model_kernels,
    scan_frame,
)
from .ssl_core import (
    NeighborhoodSpec,
    augmented_layout_id,
    clamped_track_frames,
    flow_track_deltas,
    gather_batch,
)

STAGE1 = "stage1"
FINAL = "final"


@dataclass
class Detection:
    frame_index: int
    bbox: BBox
    score: float
    stage: str = FINAL


@dataclass
class DetectionStats:
    """Aggregate stage-1/stage-2 volume counters of one detect_sequence run."""

    frames: int = 0
    scored_windows: int = 0
    stage2_candidates: int = 0
    max_store_frames: int = 0

    @property
    def candidate_ratio(self) -> float:
        return self.stage2_candidates / max(self.scored_windows, 1)


@dataclass
class _Packet:
    """Stage-1 output of one frame, pending stage-2 finalization."""

    frame_index: int
    levels: np.ndarray
    gys: np.ndarray
    gxs: np.ndarray
    scores: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    ws: np.ndarray
    hs: np.ndarray
    descriptors: np.ndarray


def nms(detections: list, iou_threshold: float = 0.5) -> list:
    """Greedy NMS: keep score-descending detections that overlap no kept one.

    Deterministic ordering: score descending, then smaller x, y, w, h.
    Expects detections of a single frame.
    """
    if len({d.frame_index for d in detections}) > 1:
        raise ValueError("nms expects detections of a single frame")
    order = sorted(
        detections, key=lambda d: (-d.score, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h)
    )
    kept = []
    kx = np.empty(len(order))
    ky = np.empty(len(order))
    kx2 = np.empty(len(order))
    ky2 = np.empty(len(order))
    ka = np.empty(len(order))
    for d in order:
        b = d.bbox
        if kept:
            n = len(kept)
            ix = np.minimum(kx2[:n], b.x2) - np.maximum(kx[:n], b.x)
            iy = np.minimum(ky2[:n], b.y2) - np.maximum(ky[:n], b.y)
            inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
            iou = inter / (ka[:n] + b.area() - inter)
            if (iou >= iou_threshold).any():
                continue
        i = len(kept)
        kx[i], ky[i], kx2[i], ky2[i], ka[i] = b.x, b.y, b.x2, b.y2, b.area()
        kept.append(d)
    return kept


def stage1_scan(
    frame,
    model: LinearModel,
    channel_cfg: ChannelConfig,
    det_cfg: DetectorConfig,
    store: ScoreMapStore,
    frame_index: int = None,
    prev_frame=None,
) -> list:
    """Dense stage-1 pass: fills the store, returns permissive candidates."""
    if frame_index is None:
        frame_index = getattr(frame, "index", 0)
    kernels = model_kernels(model.weights, channel_cfg)
    scan = scan_frame(
        frame,
        frame_index,
        kernels,
        model.bias,
        channel_cfg,
        det_cfg,
        threshold=det_cfg.stage1_threshold,
        prev_frame=prev_frame,
    )
    store.put_frame(frame_index, scan.maps)
    dets = []
    for li in np.unique(scan.cand_level):
        sel = scan.cand_level == li
        scale = scan.geometry[li][0]
        x, y, w, h = grid_to_bbox_arrays(scan.cand_gy[sel], scan.cand_gx[sel], scale, channel_cfg)
        for xi, yi, wi, hi, si in zip(x, y, w, h, scan.cand_score[sel]):
            dets.append(Detection(frame_index, BBox(int(xi), int(yi), int(wi), int(hi)), float(si), STAGE1))
    return dets


def _packet_from_scan(scan, channel_cfg) -> _Packet:
    n = len(scan.cand_score)
    xs = np.empty(n, dtype=np.int64)
    ys = np.empty(n, dtype=np.int64)
    ws = np.empty(n, dtype=np.int64)
    hs = np.empty(n, dtype=np.int64)
    desc = np.empty((n, channel_cfg.descriptor_length()), dtype=np.float32)
    for li in np.unique(scan.cand_level):
        sel = scan.cand_level == li
        scale = scan.geometry[li][0]
        x, y, w, h = grid_to_bbox_arrays(scan.cand_gy[sel], scan.cand_gx[sel], scale, channel_cfg)
        xs[sel], ys[sel], ws[sel], hs[sel] = x, y, w, h
        desc[sel] = extract_descriptors_at(scan.channels[li], scan.cand_gy[sel], scan.cand_gx[sel])
    return _Packet(
        scan.frame_index,
        scan.cand_level.copy(),
        scan.cand_gy.copy(),
        scan.cand_gx.copy(),
        scan.cand_score.copy(),
        xs, ys, ws, hs, desc,
    )


def stage2_ssl(
    packet: _Packet,
    ssl_model: LinearModel,
    spec: NeighborhoodSpec,
    store: ScoreMapStore,
    channel_cfg: ChannelConfig,
    det_cfg: DetectorConfig,
    flow_integrals: dict = None,
    last_available: int = None,
) -> list:
    """Re-score stage-1 candidates with the SSL model; keep >= stage-2 threshold.

    Boxes are never moved: every returned detection reuses a stage-1
    candidate bbox with the SSL score substituted.
    """
    if last_available is None:
        last_available = packet.frame_index
    n = len(packet.scores)
    if n == 0:
        return []
    track_frames = clamped_track_frames(spec, packet.frame_index, last_available)
    deltas = None
    if spec.volume_mode == "optical_flow":
        deltas = flow_track_deltas(
            spec, flow_integrals, track_frames, packet.xs, packet.ys, packet.ws, packet.hs
        )
    neigh = gather_batch(
        spec, store, channel_cfg, track_frames, packet.levels, packet.gys, packet.gxs, deltas
    )
    aug = np.concatenate([packet.descriptors.astype(np.float64), neigh], axis=1)
    scores = score_matrix(ssl_model, aug)
    keep = np.nonzero(scores >= det_cfg.stage2_threshold)[0]
    return [
        Detection(
            packet.frame_index,
            BBox(int(packet.xs[i]), int(packet.ys[i]), int(packet.ws[i]), int(packet.hs[i])),
            float(scores[i]),
            FINAL,
        )
        for i in keep
    ]


def detect_sequence(
    seq,
    base_model: LinearModel,
    ssl_model: LinearModel = None,
    spec: NeighborhoodSpec = None,
    channel_cfg: ChannelConfig = None,
    det_cfg: DetectorConfig = None,
    ssl_disabled: bool = False,
) -> tuple:
    """Run the two-stage pipeline over a sequence; returns (detections, stats).

    With ssl_disabled (or no SSL model) the output is stage 1 + NMS on base
    scores, the single-stage baseline. Otherwise stage 2 re-scores each
    frame's candidates once the score maps its temporal style needs exist
    (past style: immediately; future/centered: after a bounded look-ahead),
    and NMS runs on stage-2 survivors only.
    """
    det_cfg = det_cfg or DetectorConfig()
    channel_cfg = channel_cfg or ChannelConfig()
    use_ssl = not ssl_disabled and ssl_model is not None
    if use_ssl and spec is None:
        raise ValueError("SSL detection requires a NeighborhoodSpec")
    if seq.n_frames == 0:
        raise DataFormatError("empty sequence")
    if use_ssl and ssl_model.layout_id != augmented_layout_id(channel_cfg, spec):
        raise DataFormatError("SSL model layout does not match channel/neighborhood config")
    if base_model.layout_id != channel_cfg.layout_id():
        raise DataFormatError("base model layout does not match channel config")

    T = spec.T if use_ssl else 1
    offsets = spec.frame_offsets if use_ssl else (0,)
    lookahead = max(offsets)
    lookback = -min(offsets)
    kernels = model_kernels(base_model.weights, channel_cfg)
    store = ScoreMapStore(retention=T)
    need_flow = use_ssl and spec.volume_mode == "optical_flow"
    flow_ints = {}
    pending = deque()
    out = []
    stats = DetectionStats()

    def finalize(packet: _Packet, last_available: int) -> None:
        stats.stage2_candidates += len(packet.scores)
        if use_ssl:
            dets = stage2_ssl(
                packet, ssl_model, spec, store, channel_cfg, det_cfg,
                flow_ints, last_available,
            )
        else:
            dets = [
                Detection(
                    packet.frame_index,
                    BBox(int(packet.xs[i]), int(packet.ys[i]),
                         int(packet.ws[i]), int(packet.hs[i])),
                    float(packet.scores[i]),
                    STAGE1,
                )
                for i in range(len(packet.scores))
            ]
        out.extend(nms(dets, det_cfg.nms_iou))

    for f in range(seq.n_frames):
        prev = seq.frames[f - 1] if f > 0 else None
        scan = scan_frame(
            seq.frames[f].pixels,
            f,
            kernels,
            base_model.bias,
            channel_cfg,
            det_cfg,
            threshold=det_cfg.stage1_threshold,
            prev_frame=prev,
        )
        stats.frames += 1
        stats.scored_windows += scan.scored_windows
        # drop maps no pending frame (nor this one) can still read, then insert:
        # the store never holds more than T frames per level
        oldest_needed = (pending[0].frame_index if pending else f) - lookback
        store.evict_before(oldest_needed)
        for g in [g for g in flow_ints if g <= oldest_needed]:
            del flow_ints[g]
        store.put_frame(f, scan.maps)
        if need_flow and f > 0:
            flow_ints[f] = FlowIntegral(
                compute_flow(prev, seq.frames[f], det_cfg.flow_block_size,
                             det_cfg.flow_search_radius)
            )
        pending.append(_packet_from_scan(scan, channel_cfg))
        del scan
        while pending and pending[0].frame_index + lookahead <= f:
            finalize(pending.popleft(), last_available=f)
    last = seq.n_frames - 1
    while pending:
        finalize(pending.popleft(), last_available=last)
    stats.max_store_frames = store.max_frames_held
    return out, stats


# ---------------------------------------------------------------------------
# Detections CSV (consumed by evaluation and plotting)

_DET_HEADER = "frame_index,x,y,w,h,score"


def write_detections_csv(path, detections: list) -> None:
    rows = [_DET_HEADER]
    for d in sorted(detections, key=lambda d: (d.frame_index, -d.score, d.bbox.x, d.bbox.y)):
        b = d.bbox
        rows.append(f"{d.frame_index},{b.x},{b.y},{b.w},{b.h},{d.score!r}")
    Path(path).write_text("\n".join(rows) + "\n")


def read_detections_csv(path) -> list:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != _DET_HEADER:
        raise DataFormatError(f"{path}: first line must be the header {_DET_HEADER!r}")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise DataFormatError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        try:
            f, x, y, w, h = (int(p) for p in parts[:5])
            s = float(parts[5])
        except ValueError as e:
            raise DataFormatError(f"{path}:{lineno}: {e}") from e
        out.append(Detection(f, BBox(x, y, w, h), s))
    return out
