"""Point-tracking evaluation: query extraction and the AJ / <delta_avg / OA metrics.

Metrics are computed per video by pooling every (query, frame) pair, then
macro-averaged over videos. Thresholds are specified at 256 px and scaled to
the working resolution. A frame counts as predicted-occluded when its
occlusion logit is positive.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .synthdata import GroundTruthTrack, QueryPoint, Scene
from .tracker import ModelParams, forward

THRESHOLDS_256 = (1.0, 2.0, 4.0, 8.0, 16.0)
STRIDE = 5
MODES = ("strided", "q_first")


@dataclass
class MetricsReport:
    aj: float
    delta_avg: float
    oa: float
    per_threshold_accuracy: dict[str, float]
    per_threshold_jaccard: dict[str, float]
    n_points: int = 0
    n_videos: int = 1
    skipped_tracks: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def extract_queries(gt: GroundTruthTrack, mode: str, stride: int = STRIDE) -> list[QueryPoint]:
    """Strided: every visible frame that is a multiple of ``stride``. q_first: the first visible frame."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    vis = np.flatnonzero(np.asarray(gt.o) == 0)
    if vis.size == 0:
        return []
    if mode == "q_first":
        ts = vis[:1]
    else:
        ts = vis[vis % stride == 0]
    return [QueryPoint(float(gt.p[t, 0]), float(gt.p[t, 1]), int(t)) for t in ts]


def _safe_div(num, den) -> float:
    return float(num) / float(den) if den > 0 else float("nan")


def compute_metrics(
    pred_positions: Sequence[np.ndarray],
    pred_occlusion_logits: Sequence[np.ndarray],
    gts: Sequence[GroundTruthTrack],
    query_frames: Sequence[int],
    mode: str,
    working_resolution: float,
) -> MetricsReport:
    """Metrics for one video's worth of queries.

    ``pred_positions[i]`` (T x 2) and ``pred_occlusion_logits[i]`` (T) are
    the prediction for the query on ``gts[i]`` at frame ``query_frames[i]``.
    Every frame is scored in strided mode; in q_first mode only frames at or
    after the query. Empty denominators give NaN.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    n = len(gts)
    if not (len(pred_positions) == len(pred_occlusion_logits) == len(query_frames) == n):
        raise ValueError("predictions, ground truth and query frames differ in length")
    scale = working_resolution / 256.0
    thr = np.array(THRESHOLDS_256) * scale
    if n == 0:
        nan = float("nan")
        return MetricsReport(nan, nan, nan, {str(t): nan for t in THRESHOLDS_256}, {str(t): nan for t in THRESHOLDS_256}, 0)
    P = np.stack([np.asarray(p, dtype=np.float64) for p in pred_positions])
    L = np.stack([np.asarray(o, dtype=np.float64) for o in pred_occlusion_logits])
    G = np.stack([g.p for g in gts]).astype(np.float64)
    O = np.stack([g.o for g in gts]).astype(bool)
    if P.shape != G.shape or L.shape != O.shape:
        raise ValueError(f"prediction shape {P.shape} does not match ground truth {G.shape}")
    T = G.shape[1]
    frames = np.arange(T)[None, :]
    qf = np.asarray(query_frames, dtype=np.int64)[:, None]
    scored = frames >= qf if mode == "q_first" else np.ones_like(O)

    gt_vis = ~O & scored
    pred_vis = (L <= 0) & scored
    dist = np.linalg.norm(P - G, axis=-1)
    oa = _safe_div(np.sum((O == (L > 0)) & scored), np.sum(scored))
    acc, jac = {}, {}
    for t_ref, t in zip(THRESHOLDS_256, thr):
        within = dist < t
        acc[str(t_ref)] = _safe_div(np.sum(within & gt_vis), np.sum(gt_vis))
        tp = np.sum(within & gt_vis & pred_vis)
        fp = np.sum(pred_vis & ~(gt_vis & within))
        fn = np.sum(gt_vis & ~(pred_vis & within))
        jac[str(t_ref)] = _safe_div(tp, tp + fp + fn)
    return MetricsReport(
        aj=float(np.mean(list(jac.values()))),
        delta_avg=float(np.mean(list(acc.values()))),
        oa=oa,
        per_threshold_accuracy=acc,
        per_threshold_jaccard=jac,
        n_points=n,
    )


def aggregate(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Macro mean over videos; NaN entries (videos with nothing to score) are left out."""

    def m(vals):
        vals = [v for v in vals if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    keys = [str(t) for t in THRESHOLDS_256]
    return MetricsReport(
        aj=m([r.aj for r in reports]),
        delta_avg=m([r.delta_avg for r in reports]),
        oa=m([r.oa for r in reports]),
        per_threshold_accuracy={k: m([r.per_threshold_accuracy[k] for r in reports]) for k in keys},
        per_threshold_jaccard={k: m([r.per_threshold_jaccard[k] for r in reports]) for k in keys},
        n_points=int(sum(r.n_points for r in reports)),
        n_videos=len(reports),
        skipped_tracks=int(sum(r.skipped_tracks for r in reports)),
    )


@dataclass
class VideoResult:
    name: str
    report: MetricsReport
    queries: list[QueryPoint] = field(default_factory=list)
    predictions: list = field(default_factory=list)


def evaluate_scene(params: ModelParams, scene: Scene, mode: str, name: str = "") -> VideoResult:
    """Track every extracted query of ``scene`` and score it."""
    queries, gts, skipped = [], [], 0
    for gt in scene.tracks:
        qs = extract_queries(gt, mode)
        if not qs:
            skipped += 1
        for q in qs:
            queries.append(q)
            gts.append(gt)
    preds = forward(scene.video, queries, params) if queries else []
    rep = compute_metrics(
        [p.p for p in preds], [p.o for p in preds], gts, [q.t for q in queries], mode, scene.W
    )
    rep.skipped_tracks = skipped
    return VideoResult(name, rep, queries, preds)


def evaluate(params: ModelParams, scenes: Sequence[Scene], mode: str = "strided", names: Sequence[str] | None = None):
    """Per-video results and their macro-averaged report."""
    names = list(names) if names is not None else [f"video_{i:04d}" for i in range(len(scenes))]
    results = [evaluate_scene(params, s, mode, n) for s, n in zip(scenes, names)]
    return aggregate([r.report for r in results]), results


def write_report(report: MetricsReport, results: Sequence[VideoResult], json_path: str | Path, csv_path: str | Path | None = None, extra: dict | None = None) -> None:
    doc = report.to_dict()
    if extra:
        doc.update(extra)
    Path(json_path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    if csv_path is None:
        return
    keys = [str(t) for t in THRESHOLDS_256]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video", "n_points", "aj", "delta_avg", "oa"] + [f"acc@{k}" for k in keys] + [f"jac@{k}" for k in keys])
        for r in results:
            rep = r.report
            w.writerow(
                [r.name, rep.n_points, repr(rep.aj), repr(rep.delta_avg), repr(rep.oa)]
                + [repr(rep.per_threshold_accuracy[k]) for k in keys]
                + [repr(rep.per_threshold_jaccard[k]) for k in keys]
            )
