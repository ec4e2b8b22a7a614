import json

import numpy as np
import pytest

from bootstap import diffcore as dc
from bootstap.cli import main, read_config, render_overlay
from bootstap.tracker import load_checkpoint

SMALL = ["--set", "T=6", "--set", "H=32", "--set", "W=32", "--set", "n_tracks=8", "--set", "size_range=[5, 9]"]
FAST = ["--steps", "3", "--set", "batch_sup=2", "--set", "n_queries=4", "--set", "warmup_steps=1", "--set", "log_every=1", "--set", "resolution=32"]


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--domain", "A", "--clips", "3", "--seed", "1", "--out", str(root / "a"), *SMALL]) == 0
    assert main(["gen", "--domain", "B", "--clips", "3", "--eval-clips", "2", "--seed", "1", "--out", str(root / "b"), *SMALL]) == 0
    assert main(["train", "--data", str(root / "a"), "--out", str(root / "pre"), *FAST]) == 0
    return root


def test_gen_is_byte_deterministic(tmp_path):
    for d in ("x", "y"):
        assert main(["gen", "--domain", "A", "--clips", "1", "--seed", "5", "--out", str(tmp_path / d), *SMALL]) == 0
    fx, fy = files(tmp_path / "x"), files(tmp_path / "y")
    fx.pop("manifest.json"), fy.pop("manifest.json")
    assert fx == fy and any(k.endswith("frames.rgb8") for k in fx)
    before = files(tmp_path / "x")
    argv = ["gen", "--domain", "A", "--clips", "1", "--seed", "5", "--out", str(tmp_path / "x"), *SMALL, "--force"]
    assert main(argv) == 0
    after = files(tmp_path / "x")
    before.pop("manifest.json"), after.pop("manifest.json")
    assert after == before


def test_domain_b_train_split_is_unlabeled(data):
    train = sorted((data / "b" / "train").iterdir())
    assert len(train) == 3 and not any((c / "tracks.json").exists() for c in train)
    ev = sorted((data / "b" / "eval").iterdir())
    assert len(ev) == 2 and all((c / "tracks.json").exists() for c in ev)


def test_manifest_records_inputs_and_config(data):
    m = json.loads((data / "pre" / "manifest.json").read_text())
    assert m["command"] == "train" and m["config"]["n_queries"] == 4
    assert len(m["inputs"]["data"]) == 64


def test_exit_codes(tmp_path, data, capsys):
    assert main([]) == 1
    assert main(["gen", "--domain", "C", "--clips", "1", "--out", str(tmp_path / "o")]) == 1
    assert main(["gen", "--domain", "A", "--clips", "1", "--bogus", "--out", str(tmp_path / "o")]) == 1
    # existing non-empty output without --force
    assert main(["gen", "--domain", "A", "--clips", "1", "--out", str(data / "a"), *SMALL]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "none.btap"), "--data", str(data / "b" / "eval"), "--out", str(tmp_path / "e")]) == 2
    assert main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "t")]) == 2
    bad = ["bootstrap", "--data", str(data / "a"), "--unlabeled", str(data / "b" / "train"), "--init", str(data / "pre" / "final.btap")]
    assert main([*bad, "--ablation", "nonsense", "--out", str(tmp_path / "bs")]) == 1
    assert main(["train", "--data", str(data / "a"), "--set", "nokey=1", "--out", str(tmp_path / "t2")]) == 1


def test_config_file_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nsteps = 12\nuse_jpeg = false\nfilter = cycle  # inline\nlr_multiplier.refine. = 0.2\nclip_frames = none\n")
    assert read_config(p) == {"steps": 12, "use_jpeg": False, "filter": "cycle", "lr_multipliers": {"refine.": 0.2}, "clip_frames": None}
    (tmp_path / "bad.cfg").write_text("steps 12\n")
    assert main(["train", "--data", str(tmp_path), "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "o")]) == 1


def test_bootstrap_ablation_and_replay_determinism(tmp_path, data):
    argv = [
        "bootstrap", "--data", str(data / "a"), "--unlabeled", str(data / "b" / "train"),
        "--init", str(data / "pre" / "final.btap"), "--ablation", "no-affine", "--clip-frames", "4",
        "--eval-data", str(data / "b" / "eval"), *FAST, "--out", str(tmp_path / "r1"),
    ]
    assert main(argv) == 0
    m = json.loads((tmp_path / "r1" / "manifest.json").read_text())
    assert m["config"]["use_affine"] is False and m["config"]["clip_frames"] == 4
    assert m["config"]["filter"] == "confidence" and m["config"]["use_jpeg"] is True
    assert main(["--from-manifest", str(tmp_path / "r1" / "manifest.json"), "--out", str(tmp_path / "r2")]) == 0
    log1 = [json.loads(l) for l in (tmp_path / "r1" / "log.jsonl").read_text().splitlines()]
    log2 = [json.loads(l) for l in (tmp_path / "r2" / "log.jsonl").read_text().splitlines()]
    assert len(log1) == 3
    for a, b in zip(log1, log2):
        assert abs(a["sup_loss"] - b["sup_loss"]) <= 1e-6 and abs(a["ssl_loss"] - b["ssl_loss"]) <= 1e-6
        assert a["eval"] == b["eval"]
    assert (tmp_path / "r1" / "final.btap").read_bytes() == (tmp_path / "r2" / "final.btap").read_bytes()


def test_eval_is_bit_stable(tmp_path, data):
    for d in ("e1", "e2"):
        assert main(["eval", "--checkpoint", str(data / "pre" / "final.btap"), "--data", str(data / "b" / "eval"), "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "e1" / "metrics.json").read_bytes() == (tmp_path / "e2" / "metrics.json").read_bytes()
    assert (tmp_path / "e1" / "per_video.csv").read_bytes() == (tmp_path / "e2" / "per_video.csv").read_bytes()
    doc = json.loads((tmp_path / "e1" / "metrics.json").read_text())
    assert {"aj", "delta_avg", "oa", "per_threshold_accuracy"} <= set(doc)


def test_render_writes_one_png_per_frame(tmp_path, data):
    clip = sorted((data / "b" / "eval").iterdir())[0]
    out = tmp_path / "r"
    assert main(["render", "--checkpoint", str(data / "pre" / "final.btap"), "--clip", str(clip), "--out", str(out), "--max-tracks", "3"]) == 0
    assert len(list(out.glob("frame_*.png"))) == 6
    pred = json.loads((out / "predictions.json").read_text())
    assert np.asarray(pred["positions"]).shape == (3, 6, 2)


@pytest.mark.parametrize("scale", [1, 3])
def test_overlay_markers_sit_on_predictions(scale):
    T, H, W = 4, 24, 24
    video = np.zeros((T, H, W, 3))
    pos = np.array([[[5.0, 7.0], [6.0, 7.0], [9.0, 12.0], [9.0, 12.0]], [[18.0, 3.0]] * 4])
    occ = np.array([[0, 0, 0, 1], [0, 0, 0, 0]], bool)
    frames = render_overlay(video, pos, occ, scale=scale, tail=0, radius=2)
    assert len(frames) == T
    for t, img in enumerate(frames):
        a = np.asarray(img).sum(-1) > 0
        assert a.shape == (H * scale, W * scale)
        for n in range(2):
            cx, cy = scale * (pos[n, t] + 0.5) - 0.5
            ys, xs = np.nonzero(a[int(cy) - 3 : int(cy) + 4, int(cx) - 3 : int(cx) + 4])
            assert np.mean(xs) - 3 == pytest.approx(cx - int(cx), abs=0.5)
            assert np.mean(ys) - 3 == pytest.approx(cy - int(cy), abs=0.5)
            centre = a[int(round(cy)), int(round(cx))]
            assert centre != occ[n, t]  # filled when visible, hollow when occluded


def test_gradcheck_passes_and_detects_a_broken_conv(monkeypatch, capsys):
    assert main(["gradcheck", "--scope", "op"]) == 0
    assert "checks passed" in capsys.readouterr().out
    real = dc.conv2d

    def broken(x, kernel, stride=1):
        out = real(x, kernel, stride)
        if out._backward is not None:
            good = out._backward
            out._backward = lambda g: [None if v is None else 1.1 * v for v in good(g)]
        return out

    monkeypatch.setattr(dc, "conv2d", broken)
    assert main(["gradcheck", "--scope", "op"]) == 3
    assert "FAIL" in capsys.readouterr().out
