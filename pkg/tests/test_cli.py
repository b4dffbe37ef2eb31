import re

import numpy as np
import pytest

from seqssl.cli import main
from seqssl.detector import Detection, write_detections_csv
from seqssl.evaluation import EvalConfig
from seqssl.sequence_io import Annotation, BBox, load_model, save_sequence
from seqssl.synth import SynthConfig, generate

from test_evaluation import oracle_curve, oracle_lamr, ann, det

TINY_TOML = """
[channels]
channels = ["grad_hist"]
cell_size = 4
window_w = 16
window_h = 32

[svm]
lambda = 1e-2
epochs = 30
seed = 0
neg_per_frame = 6
max_mined = 150

[neighborhood]
nx = 1
ny = 1
T = 3

[detector]
scales_per_octave = 4
min_scale = 0.45

[eval]
subset = "reasonable"

[synth]
seed = 0
frames = 14
test_frames = 8
size = [160, 120]
n_targets = 2
target_height = [50, 60]
velocity = [1.5, 2.5]
noise_sigma = 8.0
distractors = 4
distractor_height = [40, 56]
target_contrast = [0.75, 1.0]
distractor_contrast = [0.4, 0.65]
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.toml").write_text(TINY_TOML)
    return d


def run(args):
    return main([str(a) for a in args])


class TestFullPipeline:
    def test_end_to_end(self, workdir, capsys):
        cfg = workdir / "cfg.toml"
        assert run(["synth", "--config", cfg, "--out", workdir / "data"]) == 0
        assert (workdir / "data" / "train" / "frame_000000.pgm").exists()
        assert (workdir / "data" / "test" / "annotations.csv").exists()

        assert run([
            "train-ssl", "--config", cfg,
            "--data", workdir / "data" / "train", "--out-dir", workdir / "models",
        ]) == 0
        base = load_model(workdir / "models" / "base.sslmodel")
        ssl = load_model(workdir / "models" / "ssl.sslmodel")
        assert base.kind == "base" and ssl.kind == "ssl"
        assert ssl.meta["neighborhood"]["T"] == 3

        assert run([
            "detect", "--config", cfg, "--data", workdir / "data" / "test",
            "--base", workdir / "models" / "base.sslmodel",
            "--ssl", workdir / "models" / "ssl.sslmodel",
            "--out", workdir / "ssl.csv",
        ]) == 0
        assert run([
            "detect", "--config", cfg, "--data", workdir / "data" / "test",
            "--base", workdir / "models" / "base.sslmodel", "--baseline",
            "--out", workdir / "base.csv",
        ]) == 0
        capsys.readouterr()

        lamrs = {}
        for name in ("base", "ssl"):
            assert run([
                "eval", "--config", cfg, "--data", workdir / "data" / "test",
                "--dets", workdir / f"{name}.csv", "--out-dir", workdir / f"eval_{name}",
            ]) == 0
            out = capsys.readouterr().out
            m = re.search(r"^LAMR=([0-9.]+)$", out, re.M)
            assert m, f"no LAMR line in output: {out!r}"
            lamrs[name] = float(m.group(1))
            assert (workdir / f"eval_{name}" / "curve.csv").exists()
        assert 0.0 <= lamrs["base"] <= 100.0
        assert 0.0 <= lamrs["ssl"] <= 100.0

        assert run([
            "plot", "--out", workdir / "plot.svg",
            f"base={workdir / 'eval_base' / 'curve.csv'}",
            f"ssl={workdir / 'eval_ssl' / 'curve.csv'}",
        ]) == 0
        svg = (workdir / "plot.svg").read_text()
        assert svg.startswith("<svg") and "polyline" in svg

    def test_detect_deterministic_bytes(self, workdir, capsys):
        cfg = workdir / "cfg.toml"
        assert run([
            "detect", "--config", cfg, "--data", workdir / "data" / "test",
            "--base", workdir / "models" / "base.sslmodel",
            "--ssl", workdir / "models" / "ssl.sslmodel",
            "--out", workdir / "ssl2.csv",
        ]) == 0
        capsys.readouterr()
        assert (workdir / "ssl2.csv").read_bytes() == (workdir / "ssl.csv").read_bytes()

    def test_plot_deterministic_bytes(self, workdir, capsys):
        assert run([
            "plot", "--out", workdir / "plot2.svg",
            f"base={workdir / 'eval_base' / 'curve.csv'}",
        ]) == 0
        assert run([
            "plot", "--out", workdir / "plot3.svg",
            f"base={workdir / 'eval_base' / 'curve.csv'}",
        ]) == 0
        capsys.readouterr()
        assert (workdir / "plot2.svg").read_bytes() == (workdir / "plot3.svg").read_bytes()

    def test_train_base_only(self, workdir, capsys):
        cfg = workdir / "cfg.toml"
        assert run([
            "train-base", "--config", cfg,
            "--data", workdir / "data" / "train", "--out", workdir / "b2.sslmodel",
        ]) == 0
        capsys.readouterr()
        m = load_model(workdir / "b2.sslmodel")
        assert m.kind == "base"
        assert m.meta["channels"]["cell_size"] == 4


class TestEvalOracle:
    def test_near_subset_matches_exhaustive_oracle(self, tmp_path, capsys):
        rng = np.random.default_rng(4)
        frames = 5
        anns, dets = [], []
        for f in range(frames):
            for _ in range(rng.integers(1, 4)):
                h = int(rng.integers(40, 110))
                anns.append(ann(f, int(rng.integers(0, 100)), int(rng.integers(0, 40)),
                                max(10, h // 2), h, occ=bool(rng.random() < 0.2)))
            for _ in range(rng.integers(0, 6)):
                if rng.random() < 0.6 and anns:
                    g = anns[rng.integers(0, len(anns))]
                    b = g.bbox
                    dets.append(det(f, b.x + int(rng.integers(-5, 6)), b.y, b.w, b.h,
                                    float(np.round(rng.normal(), 1))))
                else:
                    h = int(rng.integers(40, 110))
                    dets.append(det(f, int(rng.integers(0, 100)), int(rng.integers(0, 40)),
                                    max(10, h // 2), h, float(np.round(rng.normal(), 1))))
        # data dir with those annotations; frames are gray stand-ins
        from seqssl.sequence_io import Frame, ImageSequence

        seq = ImageSequence(
            [Frame(i, np.full((160, 220), 128, np.uint8)) for i in range(frames)],
            anns, 30.0,
        )
        save_sequence(seq, tmp_path / "gt")
        write_detections_csv(tmp_path / "dets.csv", dets)
        assert run([
            "eval", "--data", tmp_path / "gt", "--dets", tmp_path / "dets.csv",
            "--subset", "near", "--out-dir", tmp_path / "out",
        ]) == 0
        out = capsys.readouterr().out
        lamr = float(re.search(r"^LAMR=([0-9.]+)$", out, re.M).group(1))
        cfg = EvalConfig(subset="near")
        want = oracle_lamr(oracle_curve(dets, anns, frames, cfg), cfg)
        assert lamr == pytest.approx(want, abs=5e-5)  # printed with 4 decimals


class TestErrors:
    def test_detect_empty_dir_exits_2(self, workdir, tmp_path, capsys):
        empty = tmp_path / "none"
        empty.mkdir()
        code = run([
            "detect", "--data", empty,
            "--base", workdir / "models" / "base.sslmodel", "--baseline",
            "--out", tmp_path / "d.csv",
        ])
        err = capsys.readouterr().err
        assert code == 2
        assert err.startswith("error:") and err.count("\n") == 1

    def test_unknown_config_key_exits_1(self, tmp_path, capsys):
        (tmp_path / "bad.toml").write_text("[svm]\nlambdaa = 0.1\n")
        code = run(["synth", "--config", tmp_path / "bad.toml", "--out", tmp_path / "o"])
        assert code == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_unknown_section_exits_1(self, tmp_path, capsys):
        (tmp_path / "bad.toml").write_text("[nope]\nx = 1\n")
        assert run(["synth", "--config", tmp_path / "bad.toml", "--out", tmp_path / "o"]) == 1

    def test_usage_error_exits_1(self, capsys):
        assert run(["detect", "--data"]) == 1

    def test_missing_ssl_model_flag(self, workdir, capsys):
        code = run([
            "detect", "--data", workdir / "data" / "test",
            "--base", workdir / "models" / "base.sslmodel",
            "--out", "/tmp/x.csv",
        ])
        assert code == 1
        assert "--ssl" in capsys.readouterr().err

    def test_config_overrides(self, workdir, tmp_path, capsys):
        cfg = workdir / "cfg.toml"
        assert run([
            "synth", "--config", cfg, "--set", "synth.frames=3",
            "--set", "synth.test_frames=2", "--out", tmp_path / "mini",
        ]) == 0
        out = capsys.readouterr().out
        assert "(3 frames)" in out and "(2 frames)" in out
