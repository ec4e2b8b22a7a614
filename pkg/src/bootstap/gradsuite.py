"""Finite-difference checks for every differentiable op, the tracker and the losses.

Everything runs in float64 with central differences (``h = 1e-5``). Each
check reports the worst relative error ``|a - n| / max(|a|, |n|, 1e-6)``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .losses import LossConfig, pseudo_labels_batch, ssl_loss_per_track, tapir_loss_batch, total_ssl
from .rng import make_rng
from .tracker import ModelConfig, init_params, track

TOLERANCE = 1e-3
H = 1e-5
SCOPES = ("op", "model", "loss", "all")


@dataclass
class CheckResult:
    name: str
    scope: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= TOLERANCE)


def _t(rng, shape, lo=-1.0, hi=1.0):
    return dc.tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from(rng, shape, kinks=(0.0,), margin=0.05):
    """Uniform values kept ``margin`` away from the given kink locations."""
    x = rng.uniform(-1.0, 1.0, size=shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.sign(x[near] - k + 1e-12) * (margin + rng.uniform(0, 0.2, size=near.sum()))
    return dc.tensor(x, requires_grad=True)


def _scalarise(y: dc.Tensor, w: np.ndarray) -> dc.Tensor:
    """Random linear functional of ``y``, so every output entry matters."""
    return dc.sum_(dc.mul(y, dc.constant(w, y)))


def op_cases(seed: int = 0) -> dict[str, Callable[[], tuple[Callable[[], dc.Tensor], list[dc.Tensor]]]]:
    """Name -> factory returning ``(fn, inputs)`` for one op."""
    rng = make_rng(seed, "gradsuite-ops")

    def unary(op, make=None, **kw):
        def build():
            x = make() if make else _t(rng, (3, 4))
            w = rng.normal(size=x.shape)
            return (lambda: _scalarise(op(x, **kw), w)), [x]

        return build

    def binary(op, sa=(3, 4), sb=(3, 4), positive_b=False):
        def build():
            a = _t(rng, sa)
            b = _t(rng, sb, 0.5, 1.5) if positive_b else _t(rng, sb)
            w = rng.normal(size=np.broadcast_shapes(sa, sb))
            return (lambda: _scalarise(op(a, b), w)), [a, b]

        return build

    def conv2d_case(stride):
        def build():
            x = _t(rng, (2, 7, 6, 3))
            k = _t(rng, (3, 3, 3, 4))
            w = rng.normal(size=dc.conv2d(x, k, stride).shape)
            return (lambda: _scalarise(dc.conv2d(x, k, stride), w)), [x, k]

        return build

    def conv1d_case(padding):
        def build():
            x = _t(rng, (2, 5, 3))
            k = _t(rng, (3, 3, 4))
            w = rng.normal(size=(2, 5, 4))
            return (lambda: _scalarise(dc.conv1d(x, k, padding), w)), [x, k]

        return build

    def bilinear_case():
        f = _t(rng, (2, 5, 6, 3))
        # keep samples away from integer grid lines where the interpolant has kinks
        xy = rng.uniform(-1.2, 6.2, size=(2, 7, 2))
        xy = np.floor(xy) + 0.1 + 0.8 * rng.uniform(size=xy.shape)
        xy = dc.tensor(xy, requires_grad=True)
        w = rng.normal(size=(2, 7, 3))
        return (lambda: _scalarise(dc.bilinear_sample(f, xy), w)), [f, xy]

    def sample_frames_case():
        f = _t(rng, (3, 5, 6, 2))
        xy = rng.uniform(-1.2, 6.2, size=(8, 2))
        xy = dc.tensor(np.floor(xy) + 0.1 + 0.8 * rng.uniform(size=xy.shape), requires_grad=True)
        frames = rng.integers(0, 3, size=8)
        w = rng.normal(size=(8, 2))
        return (lambda: _scalarise(dc.sample_frames(f, frames, xy), w)), [f, xy]

    def huber_case():
        # norms on both sides of the knee, none within 0.05 of it
        d = rng.uniform(0.1, 3.0, size=(6,))
        d[np.abs(d - 1.0) < 0.05] += 0.2
        ang = rng.uniform(0, 2 * np.pi, size=6)
        x = dc.tensor(np.stack([d * np.cos(ang), d * np.sin(ang)], -1), requires_grad=True)
        w = rng.normal(size=6)
        return (lambda: _scalarise(dc.huber(x, 1.0), w)), [x]

    def softmax_case(axes):
        def build():
            x = _t(rng, (2, 3, 4))
            w = rng.normal(size=(2, 3, 4))
            return (lambda: _scalarise(dc.softmax(x, axes), w)), [x]

        return build

    def max_case():
        x = dc.tensor(rng.permutation(24).reshape(4, 6).astype(np.float64) * 0.1, requires_grad=True)
        w = rng.normal(size=4)
        return (lambda: _scalarise(dc.max_(x, axis=-1), w)), [x]

    def matmul_case():
        a, b = _t(rng, (2, 3, 4)), _t(rng, (2, 4, 5))
        w = rng.normal(size=(2, 3, 5))
        return (lambda: _scalarise(dc.matmul(a, b), w)), [a, b]

    def shape_case():
        a, b = _t(rng, (2, 3, 4)), _t(rng, (2, 3, 4))
        w = rng.normal(size=(4, 2, 6))

        def fn():
            c = dc.concat([a, b], axis=1)  # 2 x 6 x 4
            s = dc.stack([c, dc.mul(c, 2.0)], axis=0)  # 2 x 2 x 6 x 4
            r = dc.reshape(dc.transpose(s[0], (2, 0, 1)), (4, 2, 6))
            return _scalarise(r, w)

        return fn, [a, b]

    def take_case():
        a = _t(rng, (5, 3))
        idx = np.array([0, 2, 2, 4, 1])
        w = rng.normal(size=(5, 3))
        return (lambda: _scalarise(dc.take(a, idx, axis=0), w)), [a]

    def getitem_case():
        a = _t(rng, (4, 5))
        w1, w2 = rng.normal(size=(2, 5)), rng.normal(size=(3,))
        idx = np.array([0, 3, 3])
        return (lambda: dc.add(_scalarise(a[1:3], w1), _scalarise(a[idx, 2], w2))), [a]

    def reduce_case():
        a = _t(rng, (3, 4, 5))
        w = rng.normal(size=(3, 5))
        return (lambda: dc.add(_scalarise(dc.sum_(a, axis=1), w), dc.mean(dc.square(a)))), [a]

    def l2n_case():
        a = _t(rng, (4, 3))
        w = rng.normal(size=(4, 3))
        return (lambda: _scalarise(dc.l2_normalize(a), w)), [a]

    return {
        "add": binary(dc.add, (3, 4), (4,)),
        "sub": binary(dc.sub, (3, 1), (3, 4)),
        "mul": binary(dc.mul),
        "div": binary(dc.div, positive_b=True),
        "neg": unary(dc.neg),
        "square": unary(dc.square),
        "sigmoid": unary(dc.sigmoid),
        "relu": unary(dc.relu, lambda: _away_from(rng, (3, 4))),
        "leaky_relu": unary(dc.leaky_relu, lambda: _away_from(rng, (3, 4))),
        "softplus": unary(dc.softplus),
        "log": unary(dc.log, lambda: _t(rng, (3, 4), 0.5, 2.0)),
        "exp": unary(dc.exp),
        "sqrt": unary(dc.sqrt, lambda: _t(rng, (3, 4), 0.5, 2.0)),
        "abs": unary(dc.abs_, lambda: _away_from(rng, (3, 4))),
        "clamp": unary(dc.clamp, lambda: _away_from(rng, (3, 4), kinks=(-0.5, 0.5)), lo=-0.5, hi=0.5),
        "sum/mean": reduce_case,
        "max": max_case,
        "shape ops": shape_case,
        "take": take_case,
        "getitem": getitem_case,
        "matmul": matmul_case,
        "softmax": softmax_case((-1,)),
        "softmax2d": softmax_case((-2, -1)),
        "l2_normalize": l2n_case,
        "conv2d": conv2d_case(1),
        "conv2d/stride2": conv2d_case(2),
        "conv1d/edge": conv1d_case("edge"),
        "conv1d/zero": conv1d_case("zero"),
        "bilinear_sample": bilinear_case,
        "sample_frames": sample_frames_case,
        "huber": huber_case,
    }


def tiny_problem(seed: int = 0, T: int = 4, HW: int = 16, N: int = 3):
    """A float64 tracker on a small random video, for model and loss checks."""
    rng = make_rng(seed, "gradsuite-model")
    params = init_params(seed, ModelConfig(dtype="float64"))
    # non-zero refinement output so every branch carries gradient
    params.tensors["refine.out.w"].data = rng.normal(0, 0.1, size=params.tensors["refine.out.w"].shape)
    video = rng.uniform(0, 1, size=(1, T, HW, HW, 3))
    q = np.stack(
        [rng.uniform(1, HW - 2, size=N), rng.uniform(1, HW - 2, size=N), rng.integers(0, T, size=N)], axis=-1
    )[None]
    return params, video, q, rng


def _param_check(fn, params, max_entries: int, rng) -> float:
    leaves = params.leaves()
    return dc.gradcheck(fn, leaves, h=H, max_entries=max_entries, rng=rng)


def model_case(seed: int = 0, max_entries: int = 16) -> float:
    params, video, q, rng = tiny_problem(seed)
    outs = track(video, q, params)
    ws = [rng.normal(size=o.positions.shape) for o in outs]
    wo = [rng.normal(size=o.occlusion.shape) for o in outs]

    def fn():
        o = track(video, q, params)
        total = dc.constant(np.zeros(()), o[0].positions)
        for it, w1, w2 in zip(o, ws, wo):
            total = dc.add(total, dc.add(_scalarise(it.positions, w1), _scalarise(dc.add(it.occlusion, it.uncertainty), w2)))
        return total

    return _param_check(fn, params, max_entries, rng)


def tapir_case(seed: int = 0, max_entries: int = 16) -> float:
    params, video, q, rng = tiny_problem(seed)
    T = video.shape[1]
    with dc.no_grad():
        base = track(video, q, params)[-1].positions.data
    gt_p = base + rng.normal(0, 2.0, size=base.shape)
    gt_o = (rng.uniform(size=base.shape[:-1]) < 0.3).astype(np.float64)
    cfg = LossConfig(resolution=16)
    return _param_check(lambda: tapir_loss_batch(track(video, q, params), gt_p, gt_o, cfg), params, max_entries, rng)


def ssl_total_case(seed: int = 0, max_entries: int = 16) -> float:
    """The masked, mean-over-unmasked self-supervised objective, differentiated through the tracker."""
    params, video, q, rng = tiny_problem(seed)
    with dc.no_grad():
        s = track(video, q, params)[-1]
    t_pos = s.positions.data + rng.normal(0, 1.5, size=s.positions.shape)
    t_occ = rng.normal(0, 2.0, size=s.occlusion.shape)
    cfg = LossConfig(resolution=16)
    labels = pseudo_labels_batch(t_pos, t_occ, s.positions.data, cfg)
    masks = np.array([[1.0, 0.0, 1.0]])

    def fn():
        per = ssl_loss_per_track(track(video, q, params), labels, cfg, confidence_filter=True)
        return total_ssl(per, masks)

    return _param_check(fn, params, max_entries, rng)


def run(scope: str = "all", seed: int = 0, overrides: dict[str, Callable] | None = None) -> list[CheckResult]:
    """Run the checks in ``scope``. ``overrides`` swaps in replacement op factories (for harness tests)."""
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    results = []
    if scope in ("op", "all"):
        cases = op_cases(seed)
        cases.update(overrides or {})
        for name, build in cases.items():
            t0 = time.perf_counter()
            fn, inputs = build()
            err = dc.gradcheck(fn, inputs, h=H)
            results.append(CheckResult(name, "op", err, time.perf_counter() - t0))
    if scope in ("model", "all"):
        t0 = time.perf_counter()
        results.append(CheckResult("tracker forward", "model", model_case(seed), time.perf_counter() - t0))
    if scope in ("loss", "all"):
        for name, case in (("supervised loss", tapir_case), ("masked ssl total", ssl_total_case)):
            t0 = time.perf_counter()
            results.append(CheckResult(name, "loss", case(seed), time.perf_counter() - t0))
    return results
