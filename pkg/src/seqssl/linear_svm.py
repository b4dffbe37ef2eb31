"""Linear max-margin classifiers: Pegasos-style training and hard-negative mining.

The optimizer minimizes

    J(w, b) = lambda/2 * (||w||^2 + b^2) + mean_i max(0, 1 - y_i (w.x_i + b))

by stochastic subgradient descent with step 1/(lambda*t) over a
deterministically shuffled sample stream (the bias is an augmented,
regularized coordinate). Training is bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, NumericError
from .features import ChannelConfig, Descriptor
from .sequence_io import LABEL_PEDESTRIAN
from . import scanning


@dataclass(frozen=True)
class SvmConfig:
    lambda_: float = 1e-4
    epochs: int = 30
    seed: int = 0
    neg_per_frame: int = 10
    max_mined: int = 2000
    mining_threshold: float = -0.5
    bootstrap_rounds: int = 3

    def __post_init__(self):
        if self.lambda_ <= 0:
            raise ValueError("lambda must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    layout_id: int
    kind: str = "base"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or self.weights.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if not np.isfinite(self.weights).all() or not np.isfinite(self.bias):
            raise NumericError("model weights must be finite")
        if self.kind not in ("base", "ssl"):
            raise ValueError(f"unknown model kind {self.kind!r}")


@dataclass
class TrainSet:
    """Labelled descriptors (+1 pedestrian / -1 background) with provenance."""

    samples: list
    provenance: list = None

    def __post_init__(self):
        if not self.samples:
            raise NumericError("empty training set")
        labels = {lab for _, lab in self.samples}
        if not labels <= {-1, 1}:
            raise ValueError(f"labels must be +-1, got {labels}")
        if len(labels) < 2:
            raise NumericError("degenerate training set: single class")
        lengths = {len(d.values) for d, _ in self.samples}
        if len(lengths) != 1:
            raise ValueError(f"descriptor lengths differ: {sorted(lengths)}")
        layouts = {d.layout_id for d, _ in self.samples}
        if len(layouts) != 1:
            raise ValueError("descriptors carry mixed layout ids")

    def matrices(self) -> tuple:
        X = np.stack([d.values for d, _ in self.samples]).astype(np.float64)
        y = np.array([lab for _, lab in self.samples], dtype=np.float64)
        return X, y

    @property
    def layout_id(self) -> int:
        return self.samples[0][0].layout_id


def objective(weights, bias: float, X, y, lambda_: float) -> float:
    """The exact quantity the optimizer minimizes (regularized bias included)."""
    margins = y * (X @ weights + bias)
    hinge = np.maximum(0.0, 1.0 - margins).mean()
    return 0.5 * lambda_ * (float(weights @ weights) + bias * bias) + hinge


def objective_subgradient(weights, bias: float, X, y, lambda_: float) -> tuple:
    margins = y * (X @ weights + bias)
    viol = margins < 1.0
    n = len(y)
    gw = lambda_ * weights - (y[viol] @ X[viol]) / n
    gb = lambda_ * bias - y[viol].sum() / n
    return gw, gb


def train_matrix(X: np.ndarray, y: np.ndarray, cfg: SvmConfig) -> tuple:
    """Pegasos SGD over (X, y); returns (weights, bias)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.isfinite(X).all():
        raise NumericError("non-finite descriptor in training set")
    if len(set(np.sign(y))) < 2:
        raise NumericError("degenerate training set: single class")
    n, d = X.shape
    lam = cfg.lambda_
    # accumulated-violation form: w_t = S/(lambda*(t-1)), bias alike
    S = np.zeros(d)
    Sb = 0.0
    t = 0
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        for i in rng.permutation(n):
            t += 1
            if t == 1:
                violated = True
            else:
                margin = y[i] * (X[i] @ S + Sb) / (lam * (t - 1))
                violated = margin < 1.0
            if violated:
                yi = y[i]
                S += yi * X[i]
                Sb += yi
    return S / (lam * t), Sb / (lam * t)


def train(train_set: TrainSet, cfg: SvmConfig, kind: str = "base", meta: dict = None) -> LinearModel:
    X, y = train_set.matrices()
    w, b = train_matrix(X, y, cfg)
    return LinearModel(w, b, train_set.layout_id, kind, meta or {})


def score(model: LinearModel, d: Descriptor) -> float:
    if d.layout_id != model.layout_id:
        raise DataFormatError(
            f"descriptor layout {d.layout_id} does not match model layout {model.layout_id}"
        )
    return float(model.weights @ d.values.astype(np.float64) + model.bias)


def score_matrix(model: LinearModel, X: np.ndarray) -> np.ndarray:
    return X @ model.weights + model.bias


# ---------------------------------------------------------------------------
# Hard-negative bootstrapping


def _positive_anchors(seq, frame_index: int, geometry, channel_cfg) -> list:
    """Snap pedestrian annotations of one frame to (level, gy, gx) anchors."""
    out = []
    for ann in seq.annotations:
        if ann.frame_index != frame_index or ann.label != LABEL_PEDESTRIAN or ann.occluded:
            continue
        li = scanning.best_level_for_height(ann.bbox.h, geometry, channel_cfg)
        scale, _, grid_shape = geometry[li]
        gy, gx = scanning.bbox_to_grid(ann.bbox, scale, channel_cfg, grid_shape)
        out.append((li, gy, gx))
    return out


def _exclusion_boxes(annotations, frame_index: int) -> list:
    """Boxes negatives must not overlap: all pedestrians plus ignore regions."""
    return [a.bbox for a in annotations if a.frame_index == frame_index]


def _filter_overlaps(xs, ys, ws, hs, boxes, iou_cut: float) -> np.ndarray:
    keep = np.ones(len(xs), dtype=bool)
    for b in boxes:
        keep &= scanning.iou_with_bbox(xs, ys, ws, hs, b) < iou_cut
    return keep


NEG_IOU_CUT = 0.3


def bootstrap_train(
    seq,
    svm_cfg: SvmConfig,
    channel_cfg: ChannelConfig,
    det_cfg: scanning.DetectorConfig = None,
    frame_indices: list = None,
    rounds: int = None,
    collector: dict = None,
) -> LinearModel:
    """Train a base model with random negatives plus hard-negative mining rounds.

    Round 0 trains on annotated positives and uniformly sampled negatives
    (IoU < 0.3 against any annotation); each mining round scans the training
    frames with the current model, harvests the highest-scoring false
    positives above svm_cfg.mining_threshold (globally capped at
    svm_cfg.max_mined, deduplicated across rounds) and retrains from scratch.
    """
    if det_cfg is None:
        det_cfg = scanning.DetectorConfig()
    if rounds is None:
        rounds = svm_cfg.bootstrap_rounds
    frames = list(frame_indices) if frame_indices is not None else list(range(seq.n_frames))
    layout = channel_cfg.layout_id()
    meta = {"channels": channel_cfg.to_dict()}

    pos_rows = []
    neg_rows = []
    neg_keys = set()
    rng = np.random.default_rng([svm_cfg.seed, 17])

    n_pos = 0
    for f in frames:
        frame = seq.frames[f]
        geo = scanning.geometry_for(frame.pixels.shape, channel_cfg, det_cfg)
        anchors = _positive_anchors(seq, f, geo, channel_cfg)
        excl = _exclusion_boxes(seq.annotations, f)
        # sample random negative grid anchors across all levels
        grid_sizes = np.array([gs[0] * gs[1] for _, _, gs in geo], dtype=np.int64)
        total = int(grid_sizes.sum())
        wanted = svm_cfg.neg_per_frame
        flat = rng.integers(0, total, size=wanted * 4) if total else np.empty(0, np.int64)
        neg_anchors = []
        offsets = np.concatenate([[0], np.cumsum(grid_sizes)])
        for idx in flat:
            if len(neg_anchors) >= wanted:
                break
            li = int(np.searchsorted(offsets, idx, side="right") - 1)
            rem = idx - offsets[li]
            gh, gw = geo[li][2]
            gy, gx = int(rem // gw), int(rem % gw)
            scale = geo[li][0]
            x, y, w, h = scanning.grid_to_bbox_arrays(
                np.array([gy]), np.array([gx]), scale, channel_cfg
            )
            if excl and not _filter_overlaps(x, y, w, h, excl, NEG_IOU_CUT)[0]:
                continue
            key = (f, li, gy, gx)
            if key in neg_keys:
                continue
            neg_keys.add(key)
            neg_anchors.append((li, gy, gx))
        if not anchors and not neg_anchors:
            continue
        pyr = scanning.build_pyramid(frame.pixels, channel_cfg, det_cfg)
        prev = seq.frames[f - 1].pixels if f > 0 else None
        prev_pyr = (
            scanning.build_pyramid(prev, channel_cfg, det_cfg)
            if prev is not None and "flow_hist" in channel_cfg.channels
            else None
        )
        chans = scanning.compute_pyramid_channels(pyr, channel_cfg, f, prev_pyr)
        for li, gy, gx in anchors:
            pos_rows.append(
                scanning.extract_descriptors_at(
                    chans[li], np.array([gy]), np.array([gx])
                )[0]
            )
            n_pos += 1
        for li, gy, gx in neg_anchors:
            neg_rows.append(
                scanning.extract_descriptors_at(
                    chans[li], np.array([gy]), np.array([gx])
                )[0]
            )

    if n_pos == 0:
        raise NumericError("bootstrap_train: sequence has no positive annotations")
    if not neg_rows:
        raise NumericError("bootstrap_train: could not sample any negatives")

    def _fit():
        X = np.concatenate(
            [np.stack(pos_rows), np.stack(neg_rows)]
        ).astype(np.float64)
        y = np.concatenate([np.ones(len(pos_rows)), -np.ones(len(neg_rows))])
        w, b = train_matrix(X, y, svm_cfg)
        return LinearModel(w, b, layout, "base", meta)

    model = _fit()
    if collector is not None:
        collector.setdefault("round_models", []).append(model)
        collector["mined"] = []

    mined_any = False
    for _ in range(rounds):
        if svm_cfg.max_mined <= 0:
            break
        kernels = scanning.model_kernels(model.weights, channel_cfg)
        # bounded top-K heap: worst kept entry = lowest score, then largest key
        heap = []
        cap = svm_cfg.max_mined
        for f in frames:
            frame = seq.frames[f]
            prev = seq.frames[f - 1] if f > 0 else None
            scan = scanning.scan_frame(
                frame.pixels,
                f,
                kernels,
                model.bias,
                channel_cfg,
                det_cfg,
                threshold=svm_cfg.mining_threshold,
                prev_frame=prev,
            )
            if not len(scan.cand_score):
                continue
            keep = scan.cand_score > svm_cfg.mining_threshold
            excl = _exclusion_boxes(seq.annotations, f)
            if excl:
                for li in np.unique(scan.cand_level):
                    sel = scan.cand_level == li
                    scale = scan.geometry[li][0]
                    x, y, w, h = scanning.grid_to_bbox_arrays(
                        scan.cand_gy[sel], scan.cand_gx[sel], scale, channel_cfg
                    )
                    keep[sel] &= _filter_overlaps(x, y, w, h, excl, NEG_IOU_CUT)
            idx = np.nonzero(keep)[0]
            if not len(idx):
                continue
            for li in np.unique(scan.cand_level[idx]):
                sel = idx[scan.cand_level[idx] == li]
                rows = scanning.extract_descriptors_at(
                    scan.channels[li], scan.cand_gy[sel], scan.cand_gx[sel]
                )
                for row, i in zip(rows, sel):
                    key = (f, int(li), int(scan.cand_gy[i]), int(scan.cand_gx[i]))
                    if key in neg_keys:
                        continue
                    entry = (
                        float(scan.cand_score[i]),
                        tuple(-k for k in key),
                        key,
                        row.copy(),
                    )
                    if len(heap) < cap:
                        heapq.heappush(heap, entry)
                    elif entry[:2] > heap[0][:2]:
                        heapq.heappushpop(heap, entry)
        if not heap:
            continue
        mined_any = True
        for s, _, key, row in sorted(heap, key=lambda e: (-e[0], e[2])):
            neg_keys.add(key)
            neg_rows.append(row)
            if collector is not None:
                collector["mined"].append((key, s))
        model = _fit()
        if collector is not None:
            collector["round_models"].append(model)
    if rounds > 0 and svm_cfg.max_mined > 0 and not mined_any:
        warnings.warn("bootstrap_train: mining harvested zero windows in every round")
    return model
