import math

import numpy as np
import pytest

from seqssl.detector import Detection
from seqssl.errors import DataFormatError
from seqssl.evaluation import (
    CurvePoint,
    EvalConfig,
    curve,
    log_average_miss_rate,
    match_frame,
    read_curve_csv,
    select_subset,
    write_curve_csv,
)
from seqssl.sequence_io import Annotation, BBox


def ann(f, x, y, w, h, label="pedestrian", occ=False):
    return Annotation(f, BBox(x, y, w, h), label, occ)


def det(f, x, y, w, h, s):
    return Detection(f, BBox(x, y, w, h), s)


# ---------------------------------------------------------------------------
# Independent exhaustive oracle, written directly from the stated protocol.

BANDS = {"near": (75, math.inf), "medium": (50, 75), "reasonable": (50, math.inf)}


def oiou(a, b):
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.w * a.h + b.w * b.h - inter)


def oracle_match(dets, gts, ignores, iou):
    dets = sorted(dets, key=lambda d: (-d.score, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h))
    used = set()
    tp = fp = 0
    for d in dets:
        best, best_v = None, 0.0
        for j, g in enumerate(gts):
            if j in used:
                continue
            v = oiou(d.bbox, g.bbox)
            if v > best_v:
                best, best_v = j, v
        if best is not None and best_v >= iou:
            used.add(best)
            tp += 1
        elif any(oiou(d.bbox, g.bbox) >= iou for g in ignores):
            pass
        else:
            fp += 1
    return tp, fp, len(gts) - tp


def oracle_curve(all_dets, all_gts, n_frames, cfg):
    lo, hi = BANDS[cfg.subset]
    gts, ignores = [], []
    for a in all_gts:
        if a.label == "ignore" or a.occluded or not lo <= a.bbox.h < hi:
            ignores.append(a)
        else:
            gts.append(a)
    h_lo = lo * (1 - cfg.height_margin)
    h_hi = hi * (1 + cfg.height_margin) if math.isfinite(hi) else hi
    dets = [d for d in all_dets if h_lo <= d.bbox.h <= h_hi]
    if not dets:
        return [CurvePoint(math.inf, 0.0, 1.0)]
    points = []
    for tau in sorted({d.score for d in dets}, reverse=True):
        tp = fp = 0
        for f in {d.frame_index for d in dets} | {g.frame_index for g in gts}:
            t, p, _ = oracle_match(
                [d for d in dets if d.frame_index == f and d.score >= tau],
                [g for g in gts if g.frame_index == f],
                [g for g in ignores if g.frame_index == f],
                cfg.iou_match,
            )
            tp += t
            fp += p
        points.append(CurvePoint(tau, fp / n_frames, (len(gts) - tp) / len(gts)))
    return points


def oracle_lamr(points, cfg):
    total = 0.0
    lo, hi = cfg.fppi_range
    for s in np.logspace(math.log10(lo), math.log10(hi), cfg.n_fppi_samples):
        eligible = [p for p in points if p.fppi <= s]
        if eligible:
            best = max(eligible, key=lambda p: (p.fppi, -p.threshold))
            total += best.miss_rate
        else:
            total += max(points, key=lambda p: p.threshold).miss_rate
    return 100.0 * total / cfg.n_fppi_samples


# ---------------------------------------------------------------------------


class TestSelectSubset:
    def test_height_bands(self):
        anns = [ann(0, 0, 0, 20, 40), ann(0, 0, 0, 30, 60), ann(0, 0, 0, 40, 80)]
        near, _ = select_subset(anns, "near")
        med, _ = select_subset(anns, "medium")
        rea, _ = select_subset(anns, "reasonable")
        assert [a.bbox.h for a in near] == [80]
        assert [a.bbox.h for a in med] == [60]
        assert [a.bbox.h for a in rea] == [60, 80]

    def test_boundary_75_is_near(self):
        near, _ = select_subset([ann(0, 0, 0, 37, 75)], "near")
        assert len(near) == 1
        med, _ = select_subset([ann(0, 0, 0, 37, 75)], "medium")
        assert len(med) == 0

    def test_occluded_become_ignores(self):
        anns = [ann(0, 0, 0, 40, 80, occ=True), ann(1, 0, 0, 40, 80, occ=True)]
        gts, ignores = select_subset(anns, "near")
        assert gts == []
        assert len(ignores) == 2

    def test_ignore_label_kept_as_ignore(self):
        gts, ignores = select_subset([ann(0, 0, 0, 40, 80, label="ignore")], "reasonable")
        assert gts == [] and len(ignores) == 1


class TestMatchFrame:
    def test_exact_hit(self):
        assert match_frame([det(0, 10, 10, 40, 80, 1.0)], [ann(0, 10, 10, 40, 80)], [], 0.5) == (1, 0, 0)

    def test_double_detection_penalized(self):
        d = [det(0, 10, 10, 40, 80, 2.0), det(0, 12, 10, 40, 80, 1.0)]
        assert match_frame(d, [ann(0, 10, 10, 40, 80)], [], 0.5) == (1, 1, 0)

    def test_ignore_region_absorbs(self):
        d = [det(0, 100, 100, 40, 80, 1.0)]
        ig = [ann(0, 100, 100, 40, 80, occ=True)]
        assert match_frame(d, [], ig, 0.5) == (0, 0, 0)

    def test_input_order_invariance(self):
        rng = np.random.default_rng(0)
        dets = [
            det(0, int(rng.integers(0, 50)), int(rng.integers(0, 50)), 30, 60,
                float(np.round(rng.normal(), 1)))
            for _ in range(8)
        ]
        gts = [ann(0, 5, 5, 30, 60), ann(0, 40, 10, 30, 60)]
        want = match_frame(dets, gts, [], 0.4)
        for _ in range(10):
            rng.shuffle(dets)
            assert match_frame(dets, gts, [], 0.4) == want


class TestCurve:
    CFG = EvalConfig(subset="reasonable")

    def test_perfect_detector(self):
        gts = [ann(f, 10, 10, 40, 80) for f in range(3)]
        dets = [det(f, 10, 10, 40, 80, 5.0) for f in range(3)]
        pts = curve(dets, gts, 3, self.CFG)
        assert all(p.miss_rate == 0.0 for p in pts)
        assert log_average_miss_rate(pts, self.CFG) == 0.0

    def test_empty_detections(self):
        gts = [ann(0, 10, 10, 40, 80)]
        pts = curve([], gts, 2, self.CFG)
        assert all(p.miss_rate == 1.0 for p in pts)
        assert log_average_miss_rate(pts, self.CFG) == 100.0

    def test_empty_gt_subset_rejected(self):
        with pytest.raises(DataFormatError, match="subset"):
            curve([det(0, 0, 0, 40, 80, 1.0)], [ann(0, 0, 0, 20, 40)], 1, self.CFG)

    def test_handcrafted_three_frames(self):
        gts = [ann(0, 0, 0, 40, 80), ann(1, 100, 0, 40, 80), ann(2, 0, 100, 40, 80)]
        dets = [
            det(0, 0, 0, 40, 80, 3.0),      # TP at tau<=3
            det(0, 200, 0, 40, 80, 2.0),    # FP at tau<=2
            det(1, 100, 0, 40, 80, 1.0),    # TP at tau<=1
        ]
        pts = curve(dets, gts, 3, self.CFG)
        assert [(p.threshold, round(p.fppi, 6), round(p.miss_rate, 6)) for p in pts] == [
            (3.0, 0.0, pytest.approx(2 / 3)),
            (2.0, pytest.approx(1 / 3), pytest.approx(2 / 3)),
            (1.0, pytest.approx(1 / 3), pytest.approx(1 / 3)),
        ]

    def test_matches_oracle_on_random_micro_scenes(self):
        rng = np.random.default_rng(1)
        for scene in range(40):
            n_frames = int(rng.integers(1, 4))
            gts, dets = [], []
            for f in range(n_frames):
                for _ in range(rng.integers(0, 4)):
                    h = int(rng.integers(35, 110))
                    gts.append(
                        ann(f, int(rng.integers(0, 60)), int(rng.integers(0, 60)),
                            max(10, h // 2), h,
                            label="ignore" if rng.random() < 0.15 else "pedestrian",
                            occ=bool(rng.random() < 0.2))
                    )
                for _ in range(rng.integers(0, 6)):
                    if gts and rng.random() < 0.5:
                        g = gts[rng.integers(0, len(gts))]
                        b = g.bbox
                        box = (b.x + int(rng.integers(-6, 7)), b.y + int(rng.integers(-6, 7)), b.w, b.h)
                    else:
                        h = int(rng.integers(35, 110))
                        box = (int(rng.integers(0, 60)), int(rng.integers(0, 60)), max(10, h // 2), h)
                    dets.append(det(f, *box, float(np.round(rng.normal(), 1))))
            cfg = EvalConfig(subset=("near", "medium", "reasonable")[scene % 3])
            try:
                got = curve(dets, gts, n_frames, cfg)
            except DataFormatError:
                continue  # no GT in subset for this scene
            want = oracle_curve(dets, gts, n_frames, cfg)
            assert len(got) == len(want)
            for a, b in zip(got, want):
                assert a.threshold == b.threshold
                assert a.fppi == pytest.approx(b.fppi, abs=1e-12)
                assert a.miss_rate == pytest.approx(b.miss_rate, abs=1e-12)
            assert log_average_miss_rate(got, cfg) == pytest.approx(oracle_lamr(want, cfg), abs=1e-9)

    def test_monotonicity_and_bounds(self):
        rng = np.random.default_rng(2)
        gts = [ann(f, 10, 10, 40, 80) for f in range(4)]
        dets = [
            det(int(rng.integers(0, 4)), int(rng.integers(0, 40)), int(rng.integers(0, 40)),
                40, 80, float(rng.normal()))
            for _ in range(30)
        ]
        cfg = EvalConfig(subset="reasonable")
        pts = curve(dets, gts, 4, cfg)
        fppis = [p.fppi for p in pts]
        assert fppis == sorted(fppis)  # threshold sweeps downward
        misses = [p.miss_rate for p in pts]
        assert all(a >= b for a, b in zip(misses, misses[1:]))  # TP only grows
        lamr = log_average_miss_rate(pts, cfg)
        assert 0.0 <= lamr <= 100.0


class TestCurveCsv:
    def test_round_trip(self, tmp_path):
        pts = [CurvePoint(1.5, 0.25, 0.5), CurvePoint(0.5, 1.0, 0.125)]
        write_curve_csv(tmp_path / "c.csv", pts)
        back = read_curve_csv(tmp_path / "c.csv")
        assert [(p.threshold, p.fppi, p.miss_rate) for p in back] == [
            (1.5, 0.25, 0.5),
            (0.5, 1.0, 0.125),
        ]
