import numpy as np
import pytest

from seqssl.errors import DataFormatError
from seqssl.features import (
    ChannelConfig,
    FlowField,
    FlowIntegral,
    compute_channels,
    compute_flow,
    extract_descriptor,
    lbp_codes,
    mean_flow_in_window,
    resize_bilinear,
)
from seqssl.sequence_io import BBox, Frame

CFG_64x128 = ChannelConfig(channels=("grad_hist",), cell_size=8, window_w=64, window_h=128)
CFG_LBP = ChannelConfig(channels=("lbp_hist",), cell_size=8, window_w=64, window_h=128)
CFG_BOTH = ChannelConfig(channels=("grad_hist", "lbp_hist"), cell_size=8, window_w=64, window_h=128)


# ---------------------------------------------------------------------------
# Brute-force oracles (independent slow reimplementations)


def oracle_grad_cell_hist(img, cell):
    """Per-pixel gradient votes with circular bilinear binning, python loops."""
    img = img.astype(np.float64)
    h, w = img.shape
    ncy, ncx = h // cell, w // cell
    hist = np.zeros((ncy, ncx, 9))
    for y in range(ncy * cell):
        for x in range(ncx * cell):
            gy = (img[min(y + 1, h - 1), x] - img[max(y - 1, 0), x]) / (
                2.0 if 0 < y < h - 1 else 1.0
            )
            gx = (img[y, min(x + 1, w - 1)] - img[y, max(x - 1, 0)]) / (
                2.0 if 0 < x < w - 1 else 1.0
            )
            mag = np.hypot(gx, gy)
            ang = np.arctan2(gy, gx) % np.pi
            pos = ang * 9 / np.pi - 0.5
            lo = int(np.floor(pos))
            frac = pos - lo
            hist[y // cell, x // cell, lo % 9] += mag * (1 - frac)
            hist[y // cell, x // cell, (lo + 1) % 9] += mag * frac
    return hist


def oracle_grad_blocks(img, cell):
    h = oracle_grad_cell_hist(img, cell)
    ncy, ncx, _ = h.shape
    out = np.zeros((ncy - 1, ncx - 1, 36))
    for by in range(ncy - 1):
        for bx in range(ncx - 1):
            v = np.concatenate([h[by, bx], h[by, bx + 1], h[by + 1, bx], h[by + 1, bx + 1]])
            out[by, bx] = v / np.sqrt((v * v).sum() + 1e-12)
    return out


def oracle_uniform_label(code):
    bits = [(code >> i) & 1 for i in range(8)]
    trans = sum(bits[i] != bits[(i + 1) % 8] for i in range(8))
    return trans <= 2


def oracle_lbp_cells(img, cell):
    """Per-pixel uniform LBP(8,1) histograms; independent neighbor loop."""
    uniform_codes = sorted(c for c in range(256) if oracle_uniform_label(c))
    label_of = {c: i for i, c in enumerate(uniform_codes)}
    h, w = img.shape
    ncy, ncx = h // cell, w // cell
    hist = np.zeros((ncy, ncx, 59))
    offsets = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)]
    for y in range(ncy * cell):
        for x in range(ncx * cell):
            code = 0
            for bit, (dy, dx) in enumerate(offsets):
                ny = min(max(y + dy, 0), h - 1)
                nx = min(max(x + dx, 0), w - 1)
                if img[ny, nx] >= img[y, x]:
                    code |= 1 << bit
            label = label_of.get(code, 58)
            hist[y // cell, x // cell, label] += 1
    return np.sqrt(hist / (cell * cell))


def padded(img, cfg):
    pad_y, pad_x = cfg.pad
    return np.pad(img.astype(np.float32), ((pad_y, pad_y), (pad_x, pad_x)), mode="symmetric")


# ---------------------------------------------------------------------------


class TestGradChannel:
    def test_uniform_frame_all_zero(self):
        img = np.full((64, 64), 77, dtype=np.uint8)
        cfg = ChannelConfig(channels=("grad_hist",), cell_size=8, window_w=32, window_h=32)
        ch = compute_channels(img, cfg)
        assert np.all(ch.grids["grad_hist"] == 0.0)

    def test_vertical_step_edge_bins(self):
        img = np.full((64, 64), 50, dtype=np.uint8)
        img[:, 32:] = 200
        cfg = ChannelConfig(channels=("grad_hist",), cell_size=8, window_w=32, window_h=32)
        ch = compute_channels(img, cfg)
        g = ch.grids["grad_hist"].reshape(-1, 4, 9)
        mass = g.sum(axis=(0, 1))
        # 0-degree gradients vote into the two adjacent bin centers (10, 170 deg)
        assert mass[0] > 0 and mass[8] > 0
        assert mass[1:8].sum() == pytest.approx(0.0, abs=1e-6)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, size=(40, 48), dtype=np.uint8)
        cfg = ChannelConfig(channels=("grad_hist",), cell_size=8, window_w=16, window_h=16)
        ch = compute_channels(img, cfg)
        want = oracle_grad_blocks(padded(img, cfg), 8)
        got = ch.grids["grad_hist"][:-1, :-1]
        assert np.allclose(got, want, atol=1e-4)

    def test_block_norms_bounded(self):
        rng = np.random.default_rng(4)
        img = rng.integers(0, 256, size=(64, 64), dtype=np.uint8)
        cfg = ChannelConfig(channels=("grad_hist",), cell_size=8, window_w=16, window_h=16)
        g = compute_channels(img, cfg).grids["grad_hist"]
        norms = np.sqrt((g * g).sum(axis=2))
        assert np.all(norms <= 1.0 + 1e-6)
        assert np.isfinite(g).all()


class TestLbpChannel:
    def test_checkerboard_matches_pixel_oracle(self):
        base = np.indices((32, 32)).sum(axis=0)
        img = (((base // 2) % 2) * 255).astype(np.uint8)
        cfg = ChannelConfig(channels=("lbp_hist",), cell_size=8, window_w=16, window_h=16)
        ch = compute_channels(img, cfg)
        want = oracle_lbp_cells(padded(img, cfg), 8)
        assert np.allclose(ch.grids["lbp_hist"], want, atol=1e-6)

    def test_random_matches_pixel_oracle(self):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 256, size=(40, 40), dtype=np.uint8)
        cfg = ChannelConfig(channels=("lbp_hist",), cell_size=8, window_w=16, window_h=16)
        ch = compute_channels(img, cfg)
        want = oracle_lbp_cells(padded(img, cfg), 8)
        assert np.allclose(ch.grids["lbp_hist"], want, atol=1e-6)

    def test_uniform_image_single_bin(self):
        img = np.full((32, 32), 9, dtype=np.uint8)
        codes = lbp_codes(img)
        assert np.all(codes == 255)  # all neighbors >= center


class TestDescriptor:
    def test_hog_standard_length(self):
        img = np.random.default_rng(0).integers(0, 256, (128, 64), dtype=np.uint8)
        ch = compute_channels(img, CFG_64x128)
        d = extract_descriptor(ch, BBox(0, 0, 64, 128))
        assert len(d.values) == 3780  # 7x15 blocks x 36

    def test_lbp_length(self):
        img = np.random.default_rng(0).integers(0, 256, (128, 64), dtype=np.uint8)
        ch = compute_channels(img, CFG_LBP)
        d = extract_descriptor(ch, BBox(0, 0, 64, 128))
        assert len(d.values) == 7552  # 8x16 cells x 59

    def test_combined_length_and_layout(self):
        img = np.random.default_rng(0).integers(0, 256, (128, 64), dtype=np.uint8)
        ch = compute_channels(img, CFG_BOTH)
        d = extract_descriptor(ch, BBox(0, 0, 64, 128))
        assert len(d.values) == 3780 + 7552 == CFG_BOTH.descriptor_length()
        assert d.layout_id == CFG_BOTH.layout_id()

    def test_determinism_across_frames(self):
        img = np.random.default_rng(1).integers(0, 256, (128, 64), dtype=np.uint8)
        d1 = extract_descriptor(compute_channels(Frame(0, img), CFG_BOTH), BBox(0, 0, 64, 128))
        d2 = extract_descriptor(compute_channels(Frame(5, img.copy()), CFG_BOTH), BBox(0, 0, 64, 128))
        assert np.array_equal(d1.values, d2.values)

    def test_misaligned_window_rejected(self):
        img = np.zeros((128, 128), dtype=np.uint8)
        ch = compute_channels(img, CFG_64x128)
        with pytest.raises(DataFormatError, match="aligned"):
            extract_descriptor(ch, BBox(3, 0, 64, 128))

    def test_out_of_bounds_window_rejected(self):
        img = np.zeros((128, 64), dtype=np.uint8)
        ch = compute_channels(img, CFG_64x128)
        with pytest.raises(DataFormatError, match="outside"):
            extract_descriptor(ch, BBox(64, 0, 64, 128))

    def test_margin_windows_allowed(self):
        img = np.random.default_rng(2).integers(0, 256, (128, 64), dtype=np.uint8)
        ch = compute_channels(img, CFG_64x128)
        d = extract_descriptor(ch, BBox(-32, -64, 64, 128))
        assert np.isfinite(d.values).all()

    def test_frame_smaller_than_cell_rejected(self):
        with pytest.raises(DataFormatError, match="cell"):
            compute_channels(np.zeros((4, 4), dtype=np.uint8), CFG_64x128)

    def test_flow_hist_requires_flow(self):
        cfg = ChannelConfig(channels=("flow_hist",), cell_size=8, window_w=16, window_h=16)
        with pytest.raises(DataFormatError, match="FlowField"):
            compute_channels(np.zeros((32, 32), dtype=np.uint8), cfg)


class TestFlowHist:
    def test_uniform_flow_vector(self):
        cfg = ChannelConfig(channels=("flow_hist",), cell_size=8, window_w=16, window_h=16)
        u = np.full((4, 4), 3.0, dtype=np.float32)
        v = np.zeros((4, 4), dtype=np.float32)
        ch = compute_channels(np.zeros((32, 32), dtype=np.uint8), cfg, FlowField(u, v, 8))
        cellvec = ch.grids["flow_hist"][2, 2]
        # angle 0 splits between bins 8 and 0; magnitude bin holds |flow|
        norm = np.sqrt(2 * 1.5**2 + 3.0**2)
        assert cellvec[0] == pytest.approx(1.5 / norm, abs=1e-5)
        assert cellvec[8] == pytest.approx(1.5 / norm, abs=1e-5)
        assert cellvec[9] == pytest.approx(3.0 / norm, abs=1e-5)
        assert cellvec[1:8].sum() == pytest.approx(0.0, abs=1e-6)


class TestFlow:
    def test_identity_zero_field(self):
        rng = np.random.default_rng(6)
        img = rng.integers(0, 256, (48, 48), dtype=np.uint8)
        f = compute_flow(img, img.copy(), block_size=8, search_radius=3)
        assert np.all(f.u == 0) and np.all(f.v == 0)

    def test_translation_recovered_interior(self):
        rng = np.random.default_rng(7)
        master = rng.integers(0, 256, (96, 96), dtype=np.uint8)
        prev = master[16:80, 16:80]
        curr = master[16:80, 13:77]  # content moved right by 3
        f = compute_flow(prev, curr, block_size=8, search_radius=4)
        assert np.all(f.u[2:6, 2:6] == 3)
        assert np.all(f.v[2:6, 2:6] == 0)

    def test_noise_bounded_by_radius(self):
        rng = np.random.default_rng(8)
        a = rng.integers(0, 256, (40, 40), dtype=np.uint8)
        b = rng.integers(0, 256, (40, 40), dtype=np.uint8)
        f = compute_flow(a, b, block_size=8, search_radius=2)
        assert np.all(np.abs(f.u) <= 2) and np.all(np.abs(f.v) <= 2)

    def test_flat_frames_tie_break_to_zero(self):
        a = np.full((32, 32), 128, dtype=np.uint8)
        f = compute_flow(a, a.copy(), block_size=8, search_radius=3)
        assert np.all(f.u == 0) and np.all(f.v == 0)

    def test_dimension_mismatch(self):
        with pytest.raises(DataFormatError, match="mismatch"):
            compute_flow(np.zeros((32, 32), np.uint8), np.zeros((32, 40), np.uint8), 8, 2)


class TestMeanFlow:
    def test_uniform(self):
        u = np.full((6, 6), 3.0, np.float32)
        v = np.zeros((6, 6), np.float32)
        f = FlowField(u, v, 8)
        assert mean_flow_in_window(f, BBox(0, 0, 48, 48)) == (3.0, 0.0)

    def test_half_and_half(self):
        u = np.zeros((4, 8), np.float32)
        u[:, :4] = 2.0
        u[:, 4:] = 4.0
        f = FlowField(u, np.zeros_like(u), 8)
        assert mean_flow_in_window(f, BBox(0, 0, 64, 32)) == (3.0, 0.0)

    def test_outside_grid(self):
        f = FlowField(np.ones((4, 4), np.float32), np.ones((4, 4), np.float32), 8)
        assert mean_flow_in_window(f, BBox(100, 100, 16, 16)) == (0.0, 0.0)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(9)
        u = rng.integers(-3, 4, (10, 12)).astype(np.float32)
        v = rng.integers(-3, 4, (10, 12)).astype(np.float32)
        f = FlowField(u, v, 8)
        integral = FlowIntegral(f)
        xs = rng.integers(-20, 100, 50)
        ys = rng.integers(-20, 90, 50)
        ws = rng.integers(8, 60, 50)
        hs = rng.integers(8, 60, 50)
        mu, mv = integral.window_means(xs, ys, ws, hs)
        for i in range(50):
            su, sv = mean_flow_in_window(f, BBox(int(xs[i]), int(ys[i]), int(ws[i]), int(hs[i])))
            assert mu[i] == pytest.approx(su, abs=1e-9)
            assert mv[i] == pytest.approx(sv, abs=1e-9)


class TestResize:
    def test_identity(self):
        img = np.arange(12, dtype=np.float32).reshape(3, 4)
        assert np.array_equal(resize_bilinear(img, 3, 4), img)

    def test_constant_preserved(self):
        img = np.full((20, 30), 7.5, np.float32)
        out = resize_bilinear(img, 13, 17)
        assert np.allclose(out, 7.5)

    def test_downscale_shape(self):
        img = np.random.default_rng(0).random((64, 48)).astype(np.float32)
        assert resize_bilinear(img, 32, 24).shape == (32, 24)
