import json
import math

import numpy as np
import pytest
from scipy import stats

from bootstap import diffcore as dc
from bootstap import trainer as tr
from bootstap.losses import LossConfig
from bootstap.rng import make_rng
from bootstap.tracker import ModelConfig, ModelParams, init_params, load_checkpoint
from bootstap.trainer import (
    ABLATIONS,
    Adam,
    TrainConfig,
    TrainingError,
    apply_ablation,
    ema_update,
    lr_at,
    resolve_ablation,
    sample_student_query,
    sample_teacher_queries,
    ssl_lr_at,
    subsample_clips,
    train,
)


def tiny_cfg(**kw):
    base = dict(steps=4, batch_sup=2, batch_ssl=1, n_queries=4, warmup_steps=1, resolution=32, log_every=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# --- schedule and EMA ------------------------------------------------------


def test_schedule_endpoints_and_ssl_halving():
    assert lr_at(0, 100, 1e-3, 10) == 0.0
    assert lr_at(10, 100, 1e-3, 10) == pytest.approx(1e-3)
    assert lr_at(55, 100, 1e-3, 10) == pytest.approx(5e-4)
    assert lr_at(100, 100, 1e-3, 10) == pytest.approx(0.0, abs=1e-18)
    for s in range(0, 120):
        assert ssl_lr_at(s, 100, 1e-3, 10) == 0.5 * lr_at(s, 100, 1e-3, 10)
    lrs = [lr_at(s, 100, 1e-3, 10) for s in range(10, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_ema_examples():
    th = {"w": np.ones(3)}
    xi = {"w": np.zeros(3)}
    np.testing.assert_array_equal(ema_update(xi, th, 0.0)["w"], th["w"])
    np.testing.assert_array_equal(ema_update(xi, th, 1.0)["w"], xi["w"])
    np.testing.assert_allclose(ema_update(xi, th, 0.99)["w"], 0.01, rtol=1e-15)
    with pytest.raises(ValueError):
        ema_update({"w": np.zeros(2)}, th, 0.5)
    with pytest.raises(ValueError):
        ema_update({"v": np.zeros(3)}, th, 0.5)


def test_ema_converges_geometrically():
    rng = np.random.default_rng(0)
    theta = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=7)}
    xi = {k: rng.normal(size=v.shape) for k, v in theta.items()}
    gap = [max(np.abs(xi[k] - theta[k]).max() for k in xi)]
    e0 = {k: xi[k] - theta[k] for k in xi}
    for n in range(1, 101):
        xi = ema_update(xi, theta, 0.99)
        for k in xi:
            np.testing.assert_allclose(xi[k] - theta[k], e0[k] * 0.99**n, atol=1e-12)
        gap.append(max(np.abs(xi[k] - theta[k]).max() for k in xi))
    ratios = np.array(gap[1:]) / np.array(gap[:-1])
    assert np.abs(ratios - 0.99).max() < 1e-9


# --- query sampling --------------------------------------------------------


def test_teacher_queries_are_uniform():
    rng = make_rng(0, "tq")
    q = sample_teacher_queries((16, 48, 64), 10_000, rng)
    assert q.shape == (10_000, 3)
    assert (q[:, 0] >= -0.5).all() and (q[:, 0] < 63.5).all()
    assert (q[:, 1] >= -0.5).all() and (q[:, 1] < 47.5).all()
    counts = np.bincount(q[:, 2].astype(int), minlength=16)
    assert stats.chisquare(counts).pvalue > 0.01
    assert stats.kstest((q[:, 0] + 0.5) / 64, "uniform").pvalue > 0.01
    np.testing.assert_array_equal(q, sample_teacher_queries((16, 48, 64), 10_000, make_rng(0, "tq")))


def test_student_query_extremes():
    p = np.arange(12, dtype=float).reshape(6, 2)
    o = np.array([0, 0, 1, 0, 1, 0])
    q1 = np.array([p[1, 0], p[1, 1], 1.0])
    rng = make_rng(1, "sq")
    for _ in range(200):
        np.testing.assert_array_equal(sample_student_query(p, o, q1, 1.0, rng), q1)
        q = sample_student_query(p, o, q1, 0.0, rng)
        assert int(q[2]) in (0, 3, 5)
        np.testing.assert_array_equal(q[:2], p[int(q[2])])
    # no other visible frame: fall back to q1
    np.testing.assert_array_equal(sample_student_query(p, np.array([1, 0, 1, 1, 1, 1]), q1, 0.0, rng), q1)


def test_student_query_two_visible_frames_statistics():
    p = np.array([[1.0, 1.0], [5.0, 5.0], [9.0, 9.0]])
    o = np.array([0, 1, 0])
    q1 = np.array([1.0, 1.0, 0.0])
    rng = make_rng(2, "sq2")
    picks = np.array([sample_student_query(p, o, q1, 0.5, rng)[2] for _ in range(10_000)])
    assert abs(np.mean(picks == 0) - 0.5) < 0.02
    assert abs(np.mean(picks == 2) - 0.5) < 0.02


def test_out_of_frame_teacher_points_are_not_student_queries():
    p = np.array([[1.0, 1.0], [40.0, 5.0], [5.0, 5.0]])
    q1 = np.array([1.0, 1.0, 0.0])
    rng = make_rng(3)
    for _ in range(100):
        assert sample_student_query(p, np.zeros(3), q1, 0.0, rng, (32, 32))[2] == 2


# --- config and ablations --------------------------------------------------


def test_ablation_map():
    base = TrainConfig()
    assert apply_ablation(base, "FULL") == base
    assert apply_ablation(base, "BASE").filter == "confidence"
    assert apply_ablation(base, "same-queries").q1_equals_q2_prob == 1.0
    assert apply_ablation(base, "BASE-uniform").q1_equals_q2_prob == 0.0
    assert not apply_ablation(base, "BASE-no-affine").use_affine
    assert not apply_ablation(base, "BASE-no-augm").use_jpeg
    assert apply_ablation(base, "SIAMESE").siamese_mode
    assert not apply_ablation(base, "kubric-only").ssl_enabled
    assert apply_ablation(base, "BASE-no-filtering").filter == "none"
    for name in ABLATIONS:
        assert resolve_ablation(name) == name
    with pytest.raises(KeyError):
        resolve_ablation("nope")


def test_config_validation_and_round_trip():
    cfg = TrainConfig(batch_sup=8)
    assert cfg.batch_ssl == 4
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    for bad in (dict(q1_equals_q2_prob=1.5), dict(filter="x"), dict(clip_frames=1), dict(data_fraction=0.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


def test_hash_subsampling_is_stable():
    keys = [f"clip_{i:04d}" for i in range(400)]
    kept = subsample_clips(keys, keys, 0.25)
    assert kept == subsample_clips(keys, keys, 0.25)
    assert 60 < len(kept) < 140
    assert set(kept) <= set(subsample_clips(keys, keys, 0.5))
    assert len(subsample_clips(keys[:2], keys[:2], 1e-9)) == 1


def test_adam_first_step_is_sign_times_lr():
    params = init_params(0)
    opt = Adam.zeros_like(params)
    g = {k: np.full(v.shape, -3.0) for k, v in params.arrays().items()}
    d = opt.step(g, 0.1, {"refine.": 0.2})
    np.testing.assert_allclose(d["backbone.conv1.w"], 0.1, rtol=1e-6)
    np.testing.assert_allclose(d["refine.out.w"], 0.02, rtol=1e-6)


# --- steps -----------------------------------------------------------------


def _visible_teacher(seed):
    # negative occlusion bias so the position targets are not masked out
    p = init_params(seed)
    a = p.arrays()
    a["heads.init.b"] = np.array([-5.0, 0.0], np.float32)
    return ModelParams.from_arrays(p.config, a)


def _capture_loss(monkeypatch):
    seen = {}
    real = tr.total_ssl

    def spy(per_track, masks):
        out = real(per_track, masks)
        seen["loss"] = out
        return out

    monkeypatch.setattr(tr, "total_ssl", spy)
    return seen


def test_ema_mode_has_no_teacher_gradient_path(monkeypatch, small_scenes):
    seen = _capture_loss(monkeypatch)
    student, teacher = init_params(0), _visible_teacher(1)
    vids = np.stack([s.video for s in small_scenes[:2]])
    cfg = tiny_cfg(filter="none")
    res = tr.ssl_step(student, teacher, vids, cfg, LossConfig(resolution=32), make_rng(0))
    g = dc.Graph.build(seen["loss"])
    assert not any(g.contains(t) for t in teacher.leaves())
    assert any(g.contains(t) for t in student.leaves())
    assert res.teacher_grad_norm == 0.0 and res.mask_rate == 1.0
    # perturbing the teacher changes the labels, hence the student's gradient
    teacher2 = _visible_teacher(2)
    res2 = tr.ssl_step(student, teacher2, vids, cfg, LossConfig(resolution=32), make_rng(0))
    assert res.loss != res2.loss


def test_siamese_mode_sends_gradient_through_teacher_branch(small_scenes):
    vids = np.stack([s.video for s in small_scenes[:2]])
    res = tr.ssl_step(init_params(0), None, vids, tiny_cfg(siamese_mode=True, filter="none"), LossConfig(resolution=32), make_rng(0))
    assert res.teacher_grad_norm > 0
    with pytest.raises(ValueError):
        tr.ssl_step(init_params(0), None, vids, tiny_cfg(), LossConfig(resolution=32), make_rng(0))


def test_same_queries_are_never_cycle_masked(monkeypatch, small_scenes):
    vids = np.stack([s.video for s in small_scenes[:1]])
    res = tr.ssl_step(init_params(0), init_params(0), vids, tiny_cfg(q1_equals_q2_prob=1.0), LossConfig(resolution=32), make_rng(0))
    assert res.mask_rate == 1.0


# --- training loop ---------------------------------------------------------


def test_training_is_deterministic(tmp_path, small_scenes):
    vids = [s.video for s in small_scenes]
    a = train(tiny_cfg(), small_scenes, vids, out_dir=tmp_path / "a")
    b = train(tiny_cfg(), small_scenes, vids, out_dir=tmp_path / "b")
    assert a.losses == b.losses
    assert (tmp_path / "a" / "log.jsonl").read_bytes() == (tmp_path / "b" / "log.jsonl").read_bytes()
    for k in a.params.names():
        np.testing.assert_array_equal(a.params.tensors[k].data, b.params.tensors[k].data)
    ck = load_checkpoint(tmp_path / "a" / "final.btap")
    assert any(k.startswith("teacher/") for k in ck.extra)
    assert "opt/sup/t" in ck.extra and "opt/ssl/t" in ck.extra
    recs = [json.loads(l) for l in (tmp_path / "a" / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [2, 4]
    assert all(r["ssl_lr"] == 0.5 * r["lr"] for r in recs)


def test_teacher_is_ema_of_student(small_scenes):
    vids = [s.video for s in small_scenes]
    init = init_params(0)
    res = train(tiny_cfg(steps=1, ema_decay=0.9), small_scenes, vids, init=init)
    for k in init.names():
        expect = (0.9 * init.tensors[k].data + 0.1 * res.params.tensors[k].data).astype(np.float32)
        np.testing.assert_allclose(res.teacher.tensors[k].data, expect, rtol=1e-6, atol=1e-7)


def test_optimizer_states_are_isolated(monkeypatch, small_scenes):
    vids = [s.video for s in small_scenes]
    sup_only = train(tiny_cfg(ssl_enabled=False), small_scenes)

    def zero_ssl(student, teacher, videos, cfg, loss_cfg, rng):
        return tr.SSLResult(0.0, {k: np.zeros_like(v) for k, v in student.arrays().items()}, 1.0)

    monkeypatch.setattr(tr, "ssl_step", zero_ssl)
    both = train(tiny_cfg(), small_scenes, vids)
    for k in sup_only.opt_sup.names:
        assert sup_only.opt_sup.m[k].tobytes() == both.opt_sup.m[k].tobytes()
        assert sup_only.opt_sup.v[k].tobytes() == both.opt_sup.v[k].tobytes()
        assert not both.opt_ssl.m[k].any()
    assert both.opt_ssl.t == sup_only.opt_sup.t == 4


def test_nonfinite_steps_are_skipped_and_counted(monkeypatch, small_scenes):
    real = tr.supervised_step
    bad = {1}

    def flaky(params, cfg, loss_cfg, batch):
        loss, g = real(params, cfg, loss_cfg, batch)
        if flaky.calls in bad:
            loss = math.nan
        flaky.calls += 1
        return loss, g

    flaky.calls = 0
    monkeypatch.setattr(tr, "supervised_step", flaky)
    res = train(tiny_cfg(steps=200, ssl_enabled=False, batch_sup=1, n_queries=1, log_every=0, max_skip_rate=0.01), small_scenes)
    assert res.skipped == 1 and math.isnan(res.losses[1][0])
    flaky.calls = 0
    bad.update({2, 3})
    with pytest.raises(TrainingError):
        train(tiny_cfg(steps=200, ssl_enabled=False, batch_sup=1, n_queries=1, log_every=0), small_scenes)


def test_train_argument_errors(small_scenes):
    with pytest.raises(ValueError):
        train(tiny_cfg(), [])
    with pytest.raises(ValueError):
        train(tiny_cfg(), small_scenes, [])
