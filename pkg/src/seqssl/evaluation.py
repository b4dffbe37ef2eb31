"""FPPI / miss-rate evaluation with greedy IoU matching and height subsets.

Protocol summary: per frame, detections are matched greedily in descending
score order to the unmatched ground truth of highest IoU (at or above the
match threshold); unmatched detections overlapping an ignore region are
discarded, the rest are false positives. Ground truth outside the height
subset (or occluded) becomes ignore regions. The log-average miss rate is
the mean miss rate over log-spaced FPPI samples, as a percentage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .sequence_io import LABEL_IGNORE

SUBSET_BANDS = {
    "near": (75, float("inf")),
    "medium": (50, 75),
    "reasonable": (50, float("inf")),
}


@dataclass(frozen=True)
class EvalConfig:
    iou_match: float = 0.5
    subset: str = "reasonable"
    fppi_range: tuple = (1e-2, 1.0)
    n_fppi_samples: int = 9
    height_margin: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.iou_match < 1.0:
            raise ValueError("iou_match must be in (0, 1)")
        if self.subset not in SUBSET_BANDS:
            raise ValueError(f"subset must be one of {sorted(SUBSET_BANDS)}")
        if self.n_fppi_samples < 1:
            raise ValueError("need at least one FPPI sample")


@dataclass
class CurvePoint:
    threshold: float
    fppi: float
    miss_rate: float

    def __post_init__(self):
        self.threshold = float(self.threshold)
        self.fppi = float(self.fppi)
        self.miss_rate = float(self.miss_rate)


def select_subset(annotations: list, subset: str) -> tuple:
    """Split annotations into (evaluated ground truth, ignore regions).

    Height bands are on the annotation height; occluded pedestrians and
    out-of-band pedestrians are demoted to ignore regions, as are
    annotations labelled ignore.
    """
    lo, hi = SUBSET_BANDS[subset]
    gts, ignores = [], []
    for a in annotations:
        if a.label == LABEL_IGNORE or a.occluded or not lo <= a.bbox.h < hi:
            ignores.append(a)
        else:
            gts.append(a)
    return gts, ignores


def detection_height_band(subset: str, margin: float) -> tuple:
    lo, hi = SUBSET_BANDS[subset]
    return lo * (1.0 - margin), (hi * (1.0 + margin) if math.isfinite(hi) else hi)


def _det_sort_key(d):
    return (-d.score, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h)


def match_marks(dets: list, gts: list, ignores: list, iou: float) -> list:
    """Greedy per-frame matching; returns (score, mark) pairs in match order.

    mark: 1 = true positive, 0 = false positive, -1 = discarded on ignore.
    """
    matched = [False] * len(gts)
    marks = []
    for d in sorted(dets, key=_det_sort_key):
        best_j, best_iou = -1, 0.0
        for j, g in enumerate(gts):
            if matched[j]:
                continue
            v = d.bbox.iou(g.bbox)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= iou:
            matched[best_j] = True
            marks.append((d.score, 1))
            continue
        if any(d.bbox.iou(g.bbox) >= iou for g in ignores):
            marks.append((d.score, -1))
        else:
            marks.append((d.score, 0))
    return marks


def match_frame(dets: list, gts: list, ignores: list, iou: float = 0.5) -> tuple:
    """(tp, fp, fn) counts for a single frame."""
    marks = match_marks(dets, gts, ignores, iou)
    tp = sum(1 for _, m in marks if m == 1)
    fp = sum(1 for _, m in marks if m == 0)
    return tp, fp, len(gts) - tp


def curve(all_dets: list, all_gts: list, n_frames: int, cfg: EvalConfig) -> list:
    """FPPI / miss-rate curve points at every distinct detection score.

    n_frames is the evaluated frame count (the FPPI denominator). Points
    are ordered by descending threshold, so FPPI is non-decreasing along
    the list.
    """
    if n_frames < 1:
        raise DataFormatError("curve needs at least one frame")
    gts, ignores = select_subset(all_gts, cfg.subset)
    if not gts:
        raise DataFormatError(f"no ground truth in subset {cfg.subset!r}")
    h_lo, h_hi = detection_height_band(cfg.subset, cfg.height_margin)
    dets = [d for d in all_dets if h_lo <= d.bbox.h <= h_hi]
    if not dets:
        return [CurvePoint(float("inf"), 0.0, 1.0)]

    by_frame_d = {}
    for d in dets:
        by_frame_d.setdefault(d.frame_index, []).append(d)
    by_frame_g = {}
    for g in gts:
        by_frame_g.setdefault(g.frame_index, []).append(g)
    by_frame_i = {}
    for g in ignores:
        by_frame_i.setdefault(g.frame_index, []).append(g)

    tp_scores, fp_scores = [], []
    frames = set(by_frame_d) | set(by_frame_g)
    for f in frames:
        marks = match_marks(
            by_frame_d.get(f, []), by_frame_g.get(f, []), by_frame_i.get(f, []),
            cfg.iou_match,
        )
        for s, m in marks:
            if m == 1:
                tp_scores.append(s)
            elif m == 0:
                fp_scores.append(s)

    n_gt = len(gts)
    tp_sorted = np.sort(np.array(tp_scores, dtype=np.float64))
    fp_sorted = np.sort(np.array(fp_scores, dtype=np.float64))
    thresholds = sorted({d.score for d in dets}, reverse=True)
    points = []
    for tau in thresholds:
        tp = len(tp_sorted) - np.searchsorted(tp_sorted, tau, side="left")
        fp = len(fp_sorted) - np.searchsorted(fp_sorted, tau, side="left")
        miss = (n_gt - tp) / n_gt
        points.append(CurvePoint(float(tau), fp / n_frames, float(miss)))
    return points


def log_average_miss_rate(points: list, cfg: EvalConfig = None) -> float:
    """Mean miss rate (percent) at log-spaced FPPI samples.

    Each sample takes the lowest-threshold curve point with FPPI at or
    below it; samples below the whole curve use the highest-threshold point.
    """
    cfg = cfg or EvalConfig()
    if not points:
        return 100.0
    lo, hi = cfg.fppi_range
    samples = np.logspace(math.log10(lo), math.log10(hi), cfg.n_fppi_samples)
    total = 0.0
    for s in samples:
        chosen = None
        for p in points:  # descending threshold, non-decreasing FPPI
            if p.fppi <= s:
                chosen = p
            else:
                break
        if chosen is None:
            chosen = points[0]
        total += chosen.miss_rate
    return 100.0 * total / len(samples)


def evaluate(all_dets, all_gts, n_frames: int, cfg: EvalConfig) -> tuple:
    pts = curve(all_dets, all_gts, n_frames, cfg)
    return pts, log_average_miss_rate(pts, cfg)


# ---------------------------------------------------------------------------
# Curve CSV and SVG plot

_CURVE_HEADER = "threshold,fppi,miss_rate"


def write_curve_csv(path, points: list) -> None:
    rows = [_CURVE_HEADER]
    rows += [f"{p.threshold!r},{p.fppi!r},{p.miss_rate!r}" for p in points]
    Path(path).write_text("\n".join(rows) + "\n")


def read_curve_csv(path) -> list:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != _CURVE_HEADER:
        raise DataFormatError(f"{path}: first line must be the header {_CURVE_HEADER!r}")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise DataFormatError(f"{path}:{lineno}: expected 3 fields")
        try:
            out.append(CurvePoint(float(parts[0]), float(parts[1]), float(parts[2])))
        except ValueError as e:
            raise DataFormatError(f"{path}:{lineno}: {e}") from e
    return out


_PALETTE = ("#c1272d", "#0000a7", "#008176", "#eecc16", "#b3b3b3", "#6a3d9a")


def plot_curves_svg(named_curves: list, path, fppi_range=(1e-2, 1.0)) -> None:
    """Overlay miss-rate curves (log-x FPPI axis) into a standalone SVG."""
    width, height = 640, 460
    ml, mr, mt, mb = 70, 20, 20, 50
    x_lo = math.log10(fppi_range[0] / 10.0)
    x_hi = math.log10(fppi_range[1] * 10.0)

    def sx(fppi):
        v = math.log10(max(fppi, 10 ** x_lo))
        return ml + (v - x_lo) / (x_hi - x_lo) * (width - ml - mr)

    def sy(miss):
        return mt + (1.0 - miss) * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{ml}" y="{mt}" width="{width - ml - mr}" height="{height - mt - mb}" '
        'fill="none" stroke="black"/>',
    ]
    dec = int(math.floor(x_lo))
    while dec <= x_hi:
        x = sx(10.0 ** dec)
        parts.append(
            f'<line x1="{x:.1f}" y1="{mt}" x2="{x:.1f}" y2="{height - mb}" '
            'stroke="#dddddd"/>'
        )
        parts.append(
            f'<text x="{x:.1f}" y="{height - mb + 18}" font-size="12" '
            f'text-anchor="middle">1e{dec}</text>'
        )
        dec += 1
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(frac)
        parts.append(
            f'<line x1="{ml}" y1="{y:.1f}" x2="{width - mr}" y2="{y:.1f}" stroke="#dddddd"/>'
        )
        parts.append(
            f'<text x="{ml - 8}" y="{y + 4:.1f}" font-size="12" text-anchor="end">{frac:.2f}</text>'
        )
    parts.append(
        f'<text x="{(ml + width - mr) / 2:.1f}" y="{height - 12}" font-size="13" '
        'text-anchor="middle">false positives per image</text>'
    )
    parts.append(
        f'<text x="16" y="{(mt + height - mb) / 2:.1f}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 16 {(mt + height - mb) / 2:.1f})">miss rate</text>'
    )
    for ci, (label, points) in enumerate(named_curves):
        color = _PALETTE[ci % len(_PALETTE)]
        coords = " ".join(
            f"{sx(p.fppi):.2f},{sy(p.miss_rate):.2f}"
            for p in sorted(points, key=lambda p: -p.threshold)
        )
        if coords:
            parts.append(
                f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>'
            )
        ly = mt + 18 + 18 * ci
        parts.append(
            f'<line x1="{ml + 10}" y1="{ly - 4}" x2="{ml + 40}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(f'<text x="{ml + 46}" y="{ly}" font-size="12">{label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
