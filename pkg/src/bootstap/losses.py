"""Supervised and self-supervised tracking losses.

Every loss is built from one per-frame term: a Huber position penalty and an
uncertainty BCE, both gated by the target's visibility, plus an occlusion BCE
on every frame. The batched functions work on ``diffcore`` tensors shaped
``B x N x T``; the single-trajectory wrappers take plain predictions and are
what the hand-computed examples in the tests exercise.

Distance thresholds are given at a 256-pixel reference resolution and scaled
to the working resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .synthdata import GroundTruthTrack, QueryPoint
from .tracker import IterationOutput, TrajectoryPrediction


@dataclass(frozen=True)
class LossConfig:
    delta: float = 6.0
    delta_cycle: float = 4.0
    huber_knee: float = 1.0
    scale_reference: float = 256.0
    resolution: float = 256.0
    confidence_filter_threshold: float = 0.6

    def __post_init__(self):
        for name in ("delta", "delta_cycle", "huber_knee", "scale_reference", "resolution"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.5 <= self.confidence_filter_threshold <= 1.0:
            raise ValueError("confidence_filter_threshold must lie in [0.5, 1]")

    @property
    def scale(self) -> float:
        return self.resolution / self.scale_reference

    @property
    def delta_px(self) -> float:
        return self.delta * self.scale

    @property
    def delta_cycle_px(self) -> float:
        return self.delta_cycle * self.scale


@dataclass
class PseudoLabels:
    """Frozen teacher targets for one trajectory (or a ``B x N`` batch of them)."""

    p_T: np.ndarray  # [...] x T x 2
    o_T: np.ndarray  # [...] x T in {0, 1}
    u_T: np.ndarray  # [...] x T in {0, 1}
    occ_logits: np.ndarray  # teacher's raw occlusion logits, for the confidence filter

    def __post_init__(self):
        if not np.isfinite(self.p_T).all():
            raise ValueError("pseudo-label positions must be finite")
        for arr in (self.o_T, self.u_T):
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("binary pseudo-labels must be 0 or 1")


# ---------------------------------------------------------------------------
# batched tensor losses


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise ``-[y log s(x) + (1-y) log(1-s(x))]`` = ``softplus(x) - y*x``."""
    return dc.sub(dc.softplus(logits), dc.mul(logits, dc.constant(target, logits)))


def frame_terms(
    out: IterationOutput,
    p: np.ndarray,
    o: np.ndarray,
    u: np.ndarray,
    cfg: LossConfig,
    occ_weight: np.ndarray | None = None,
) -> Tensor:
    """Per-trajectory mean over frames of the three-part loss; shape ``B x N``."""
    pos = out.positions
    vis = dc.constant(1.0 - np.asarray(o, dtype=np.float64), pos)
    target = p if isinstance(p, Tensor) else dc.constant(p, pos)
    pos_term = dc.mul(dc.huber(dc.sub(pos, target), cfg.huber_knee), vis)
    occ_term = bce_with_logits(out.occlusion, o)
    if occ_weight is not None:
        occ_term = dc.mul(occ_term, dc.constant(occ_weight, pos))
    unc_term = dc.mul(bce_with_logits(out.uncertainty, u), vis)
    return dc.mean(dc.add(dc.add(pos_term, occ_term), unc_term), axis=-1)


def _iteration_mean(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = dc.add(acc, t)
    return dc.mul(acc, 1.0 / len(terms))


def uncertainty_target(pred_pos: np.ndarray, ref_pos: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """``1(|pred - ref| > delta)`` per frame, on detached values."""
    d = np.linalg.norm(np.asarray(pred_pos, dtype=np.float64) - np.asarray(ref_pos, dtype=np.float64), axis=-1)
    return (d > cfg.delta_px).astype(np.float64)


def tapir_loss_per_track(outs: list[IterationOutput], gt_p: np.ndarray, gt_o: np.ndarray, cfg: LossConfig) -> Tensor:
    """Supervised loss for every trajectory (``B x N``), averaged over iterations."""
    terms = []
    for out in outs:
        u = uncertainty_target(out.positions.data, gt_p, cfg)
        terms.append(frame_terms(out, gt_p, gt_o, u, cfg))
    return _iteration_mean(terms)


def tapir_loss_batch(outs: list[IterationOutput], gt_p: np.ndarray, gt_o: np.ndarray, cfg: LossConfig) -> Tensor:
    return dc.mean(tapir_loss_per_track(outs, gt_p, gt_o, cfg))


def confidence_weights(occ_logits: np.ndarray, threshold: float) -> np.ndarray:
    """0 where the teacher's visibility confidence ``max(s, 1-s)`` is below ``threshold``."""
    s = 1.0 / (1.0 + np.exp(-np.asarray(occ_logits, dtype=np.float64)))
    return (np.maximum(s, 1.0 - s) >= threshold).astype(np.float64)


def ssl_loss_per_track(
    outs: list[IterationOutput], labels: PseudoLabels, cfg: LossConfig, confidence_filter: bool = False
) -> Tensor:
    """Student loss against pseudo-labels for every trajectory (``B x N``).

    The student positions must already be in the teacher's coordinate frame.
    """
    w = confidence_weights(labels.occ_logits, cfg.confidence_filter_threshold) if confidence_filter else None
    terms = [frame_terms(out, labels.p_T, labels.o_T, labels.u_T, cfg, w) for out in outs]
    return _iteration_mean(terms)


def total_ssl(per_track: Tensor, masks: np.ndarray) -> Tensor:
    """Mean of ``per_track`` over trajectories whose mask is 1.

    Masked trajectories are dropped from the graph before reduction, so the
    result and its gradients are exactly those of the batch without them.
    With every mask at 0 the result is a constant 0.
    """
    flat = dc.reshape(per_track, (-1,)) if per_track.ndim != 1 else per_track
    keep = np.flatnonzero(np.asarray(masks).reshape(-1) > 0)
    if keep.size == 0:
        return dc.constant(np.zeros((), dtype=per_track.dtype))
    return dc.mean(dc.take(flat, keep, axis=0))


def pseudo_labels_batch(
    teacher_pos: np.ndarray, teacher_occ: np.ndarray, student_pos: np.ndarray, cfg: LossConfig
) -> PseudoLabels:
    teacher_pos = np.array(teacher_pos, dtype=np.float64)
    teacher_occ = np.array(teacher_occ, dtype=np.float64)
    return PseudoLabels(
        p_T=teacher_pos,
        o_T=(teacher_occ > 0).astype(np.float64),
        u_T=uncertainty_target(teacher_pos, student_pos, cfg),
        occ_logits=teacher_occ,
    )


def cycle_masks_batch(
    student_pos: np.ndarray, student_occ: np.ndarray, q1: np.ndarray, cfg: LossConfig
) -> np.ndarray:
    """Cycle gate for ``[...] x T`` student tracks against ``[...] x 3`` teacher queries."""
    t1 = np.asarray(q1[..., 2], dtype=np.int64)
    at = np.take_along_axis(np.asarray(student_pos), t1[..., None, None], axis=-2)[..., 0, :]
    occ = np.take_along_axis(np.asarray(student_occ), t1[..., None], axis=-1)[..., 0]
    d = np.linalg.norm(at - np.asarray(q1[..., :2], dtype=np.float64), axis=-1)
    return ((d < cfg.delta_cycle_px) & (occ <= 0)).astype(np.float64)


# ---------------------------------------------------------------------------
# single-trajectory API


def _as_outputs(pred: TrajectoryPrediction, requires_grad: bool = False) -> list[IterationOutput]:
    outs = []
    for p, o, u in zip(pred.positions, pred.occlusion, pred.uncertainty):
        outs.append(
            IterationOutput(
                dc.tensor(np.asarray(p, dtype=np.float64)[None, None], requires_grad),
                dc.tensor(np.asarray(o, dtype=np.float64)[None, None], requires_grad),
                dc.tensor(np.asarray(u, dtype=np.float64)[None, None], requires_grad),
            )
        )
    return outs


def tapir_loss(pred: TrajectoryPrediction, gt: GroundTruthTrack, cfg: LossConfig = LossConfig()) -> float:
    if pred.p.shape != gt.p.shape:
        raise ValueError(f"prediction has {pred.p.shape[0]} frames, ground truth {gt.p.shape[0]}")
    outs = _as_outputs(pred)
    return float(tapir_loss_batch(outs, gt.p[None, None], gt.o[None, None].astype(np.float64), cfg).data)


def derive_pseudo_labels(
    teacher: TrajectoryPrediction, student: TrajectoryPrediction, cfg: LossConfig = LossConfig()
) -> PseudoLabels:
    """Targets from the teacher's final iteration; ``u`` compares against the student's final positions."""
    return pseudo_labels_batch(teacher.p, teacher.o, student.p, cfg)


def ssl_loss(
    student: TrajectoryPrediction,
    labels: PseudoLabels,
    cfg: LossConfig = LossConfig(),
    confidence_filter: bool = False,
) -> float:
    lab = PseudoLabels(labels.p_T[None, None], labels.o_T[None, None], labels.u_T[None, None], labels.occ_logits[None, None])
    return float(ssl_loss_per_track(_as_outputs(student), lab, cfg, confidence_filter).data.reshape(()))


def cycle_mask(student: TrajectoryPrediction, q1: QueryPoint, cfg: LossConfig = LossConfig()) -> int:
    """1 iff the student's final track passes within ``delta_cycle`` of ``q1`` at ``q1.t`` and is visible there."""
    m = cycle_masks_batch(student.p, student.o, np.array([q1.x, q1.y, q1.t], dtype=np.float64), cfg)
    return int(m)
