"""Student-teacher training.

Each step applies one supervised update on labeled clips and, when enabled,
one self-supervised update on unlabeled clips. The two tasks keep their own
Adam moments; their parameter deltas are summed and applied together, then
the teacher follows the student by an exponential moving average.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .losses import (
    LossConfig,
    PseudoLabels,
    cycle_masks_batch,
    pseudo_labels_batch,
    ssl_loss_per_track,
    tapir_loss_batch,
    total_ssl,
)
from .rng import make_rng
from .synthdata import QueryPoint, Scene
from .tracker import ModelParams, save_checkpoint, track
from .transforms import DegradationConfig, make_student_view

log = logging.getLogger(__name__)

FILTERS = ("none", "confidence", "cycle", "both")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_sup: int = 8
    batch_ssl: int | None = None  # defaults to batch_sup // 2
    n_queries: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    ema_decay: float = 0.99
    q1_equals_q2_prob: float = 0.5
    use_affine: bool = True
    use_jpeg: bool = True
    filter: str = "both"
    siamese_mode: bool = False
    ssl_enabled: bool = True
    clip_frames: int | None = None  # unlabeled clip length; None keeps full clips
    data_fraction: float = 1.0
    resolution: int = 64
    grad_clip: float | None = 10.0
    lr_multipliers: dict[str, float] = field(default_factory=dict)  # parameter-name prefix -> factor
    log_every: int = 50
    checkpoint_every: int = 0
    max_skip_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.batch_ssl is None:
            self.batch_ssl = max(1, self.batch_sup // 2)

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 <= self.q1_equals_q2_prob <= 1.0:
            raise ValueError("q1_equals_q2_prob must lie in [0, 1]")
        if self.ssl_enabled and self.batch_ssl < 1:
            raise ValueError("batch_ssl must be >= 1 when ssl is enabled")
        if self.batch_sup < 1 or self.n_queries < 1:
            raise ValueError("batch_sup and n_queries must be >= 1")
        if self.filter not in FILTERS:
            raise ValueError(f"filter must be one of {FILTERS}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ValueError("data_fraction must lie in (0, 1]")
        if self.clip_frames is not None and self.clip_frames < 2:
            raise ValueError("clip_frames must be >= 2")

    @property
    def confidence_filter(self) -> bool:
        return self.filter in ("confidence", "both")

    @property
    def cycle_filter(self) -> bool:
        return self.filter in ("cycle", "both")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# Each named variant is exactly one set of overrides on the defaults.
ABLATIONS: dict[str, dict] = {
    "FULL": {},
    "BASE": {"filter": "confidence"},
    "BASE-no-augm": {"filter": "confidence", "use_jpeg": False},
    "BASE-no-affine": {"filter": "confidence", "use_affine": False},
    "BASE-same-queries": {"filter": "confidence", "q1_equals_q2_prob": 1.0},
    "BASE-uniform": {"filter": "confidence", "q1_equals_q2_prob": 0.0},
    "BASE-no-filtering": {"filter": "none"},
    "BASE+cycle": {"filter": "both"},
    "SIAMESE": {"siamese_mode": True},
    "FULL-kubric-only": {"ssl_enabled": False},
}
_ALIASES = {
    "no-augm": "BASE-no-augm",
    "no-affine": "BASE-no-affine",
    "same-queries": "BASE-same-queries",
    "uniform": "BASE-uniform",
    "no-filtering": "BASE-no-filtering",
    "cycle": "BASE+cycle",
    "siamese": "SIAMESE",
    "kubric-only": "FULL-kubric-only",
    "full": "FULL",
    "base": "BASE",
}


def resolve_ablation(name: str) -> str:
    if name in ABLATIONS:
        return name
    if name in _ALIASES:
        return _ALIASES[name]
    raise KeyError(f"unknown ablation {name!r}; known: {sorted(ABLATIONS)}")


def apply_ablation(cfg: TrainConfig, name: str) -> TrainConfig:
    return replace(cfg, **ABLATIONS[resolve_ablation(name)])


# ---------------------------------------------------------------------------
# optimisation


def lr_at(step: int, total: int, peak: float, warmup: int) -> float:
    """Linear warmup from 0 to ``peak`` over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    span = max(total - warmup, 1)
    frac = min(max(step - warmup, 0) / span, 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def ssl_lr_at(step: int, total: int, peak: float, warmup: int) -> float:
    # half the batch, half the rate
    return 0.5 * lr_at(step, total, peak, warmup)


@dataclass
class Adam:
    """Adam moments for one task. Returns parameter deltas instead of applying them."""

    names: list[str]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Adam":
        arrs = params.arrays()
        return cls(
            names=list(arrs),
            m={k: np.zeros_like(a, dtype=np.float64) for k, a in arrs.items()},
            v={k: np.zeros_like(a, dtype=np.float64) for k, a in arrs.items()},
        )

    def step(self, grads: dict[str, np.ndarray], lr: float, multipliers: dict[str, float] | None = None) -> dict[str, np.ndarray]:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        out = {}
        for k in self.names:
            g = grads[k].astype(np.float64)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            scale = lr * _multiplier(k, multipliers)
            out[k] = -scale * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)
        return out

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        d = {f"{prefix}m/{k}": self.m[k] for k in self.names}
        d.update({f"{prefix}v/{k}": self.v[k] for k in self.names})
        d[f"{prefix}t"] = np.array([self.t], dtype=np.float32)
        return d

    @classmethod
    def from_state(cls, entries: dict[str, np.ndarray], prefix: str, params: ModelParams) -> "Adam":
        opt = cls.zeros_like(params)
        if f"{prefix}t" not in entries:
            return opt
        opt.t = int(entries[f"{prefix}t"][0])
        for k in opt.names:
            opt.m[k] = entries[f"{prefix}m/{k}"].astype(np.float64)
            opt.v[k] = entries[f"{prefix}v/{k}"].astype(np.float64)
        return opt


def _multiplier(name: str, multipliers: dict[str, float] | None) -> float:
    if not multipliers:
        return 1.0
    best = ""
    for prefix in multipliers:
        if name.startswith(prefix) and len(prefix) > len(best):
            best = prefix
    return multipliers[best] if best else 1.0


def ema_update(teacher: dict[str, np.ndarray], student: dict[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    if set(teacher) != set(student):
        raise ValueError("teacher and student parameter names differ")
    out = {}
    for k in teacher:
        if teacher[k].shape != student[k].shape:
            raise ValueError(f"shape mismatch for {k}: {teacher[k].shape} vs {student[k].shape}")
        out[k] = (decay * teacher[k] + (1.0 - decay) * student[k]).astype(teacher[k].dtype)
    return out


def clip_grads(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        f = max_norm / norm
        grads = {k: g * f for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------------------
# query sampling


def sample_teacher_queries(video_shape: Sequence[int], n_q: int, rng: np.random.Generator) -> np.ndarray:
    """``n_q x 3`` rows ``(x, y, t)``, uniform over the image extent and over frames.

    With pixel centres at integers the image covers ``[-0.5, W - 0.5)``.
    """
    T, H, W = int(video_shape[0]), int(video_shape[1]), int(video_shape[2])
    x = rng.uniform(-0.5, W - 0.5, size=n_q)
    y = rng.uniform(-0.5, H - 0.5, size=n_q)
    t = rng.integers(0, T, size=n_q)
    return np.stack([x, y, t.astype(np.float64)], axis=-1)


def sample_student_query(
    teacher_p: np.ndarray,
    teacher_o: np.ndarray,
    q1: np.ndarray,
    prob: float,
    rng: np.random.Generator,
    frame_hw: tuple[int, int] | None = None,
) -> np.ndarray:
    """Keep ``q1`` with probability ``prob``; otherwise a uniform visible teacher point on another frame.

    ``teacher_p`` is ``T x 2`` and ``teacher_o`` binary (1 = occluded). With
    ``frame_hw`` set, candidates outside the image are not eligible. Falls
    back to ``q1`` when nothing else qualifies.
    """
    q1 = np.asarray(q1, dtype=np.float64)
    if rng.random() < prob:
        return q1.copy()
    t1 = int(q1[2])
    ok = np.asarray(teacher_o) == 0
    ok[t1] = False
    if frame_hw is not None:
        H, W = frame_hw
        p = np.asarray(teacher_p)
        ok &= (p[:, 0] >= -0.5) & (p[:, 0] < W - 0.5) & (p[:, 1] >= -0.5) & (p[:, 1] < H - 0.5)
    cand = np.flatnonzero(ok)
    if cand.size == 0:
        return q1.copy()
    t = int(cand[rng.integers(cand.size)])
    return np.array([teacher_p[t, 0], teacher_p[t, 1], float(t)])


def query_point(row: np.ndarray) -> QueryPoint:
    return QueryPoint(float(row[0]), float(row[1]), int(row[2]))


# ---------------------------------------------------------------------------
# data


def keep_by_hash(key: str, fraction: float) -> bool:
    """Deterministic subsampling: keep ``key`` iff its hash falls below ``fraction``."""
    h = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
    return h / 2.0**64 < fraction


def subsample_clips(clips: Sequence, keys: Sequence[str], fraction: float) -> list:
    if fraction >= 1.0:
        return list(clips)
    kept = [c for c, k in zip(clips, keys) if keep_by_hash(k, fraction)]
    if not kept:
        # keep the single clip with the smallest hash so the run stays valid
        best = min(range(len(keys)), key=lambda i: hashlib.sha256(keys[i].encode()).digest())
        kept = [clips[best]]
    return kept


def _labeled_queries(scene: Scene, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Queries, gt positions and occlusion for every labeled track of ``scene``."""
    P = np.stack([tr.p for tr in scene.tracks])
    O = np.stack([tr.o for tr in scene.tracks]).astype(np.float64)
    if scene.queries:
        Q = np.array([[q.x, q.y, q.t] for q in scene.queries], dtype=np.float64)
    else:
        rows = []
        for p, o in zip(P, O):
            vis = np.flatnonzero(o == 0)
            t = int(vis[rng.integers(vis.size)]) if vis.size else 0
            rows.append([p[t, 0], p[t, 1], t])
        Q = np.array(rows, dtype=np.float64)
    return Q, P, O


def supervised_batch(scenes: Sequence[Scene], cfg: TrainConfig, step: int):
    rng = make_rng(cfg.seed, "sup-batch", step)
    picks = rng.integers(len(scenes), size=cfg.batch_sup)
    vids, qs, ps, os_ = [], [], [], []
    for i in picks:
        sc = scenes[int(i)]
        Q, P, O = _labeled_queries(sc, rng)
        valid = np.flatnonzero(O[np.arange(len(Q)), Q[:, 2].astype(np.int64)] == 0) if not sc.queries else np.arange(len(Q))
        if valid.size == 0:
            valid = np.arange(len(Q))
        sel = rng.choice(valid, size=cfg.n_queries, replace=valid.size < cfg.n_queries)
        vids.append(sc.video)
        qs.append(Q[sel])
        ps.append(P[sel])
        os_.append(O[sel])
    return np.stack(vids), np.stack(qs), np.stack(ps), np.stack(os_)


def unlabeled_batch(videos: Sequence[np.ndarray], cfg: TrainConfig, step: int) -> np.ndarray:
    rng = make_rng(cfg.seed, "ssl-batch", step)
    picks = rng.integers(len(videos), size=cfg.batch_ssl)
    out = []
    for i in picks:
        v = videos[int(i)]
        if cfg.clip_frames is not None and cfg.clip_frames < v.shape[0]:
            s = int(rng.integers(v.shape[0] - cfg.clip_frames + 1))
            v = v[s : s + cfg.clip_frames]
        out.append(v)
    return np.stack(out)


# ---------------------------------------------------------------------------
# steps


def supervised_step(params: ModelParams, cfg: TrainConfig, loss_cfg: LossConfig, batch) -> tuple[float, dict[str, np.ndarray]]:
    vids, qs, ps, os_ = batch
    outs = track(vids, qs, params)
    loss = tapir_loss_batch(outs, ps, os_, loss_cfg)
    names = params.names()
    grads = dc.backward(loss, [params.tensors[k] for k in names])
    return float(loss.data), dict(zip(names, grads))


@dataclass
class SSLResult:
    loss: float
    grads: dict[str, np.ndarray]
    mask_rate: float
    teacher_grad_norm: float = 0.0  # siamese only: gradient reaching the teacher branch


def ssl_step(
    student: ModelParams,
    teacher: ModelParams | None,
    videos: np.ndarray,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    rng: np.random.Generator,
) -> SSLResult:
    """One self-supervised gradient computation on a batch of unlabeled clips.

    In siamese mode ``teacher`` is ignored: the student also produces the
    pseudo-label positions and gradients flow through both branches.
    """
    B, T, H, W = videos.shape[:4]
    N = cfg.n_queries
    q1 = np.stack([sample_teacher_queries((T, H, W), N, rng) for _ in range(B)])

    if cfg.siamese_mode:
        t_out = track(videos, q1, student)[-1]
        t_pos_tensor = t_out.positions
    else:
        if teacher is None:
            raise ValueError("EMA mode needs teacher parameters")
        with dc.no_grad():
            t_out = track(videos, q1, teacher)[-1]
        t_pos_tensor = None
    t_pos = t_out.positions.data.astype(np.float64)
    t_occ = t_out.occlusion.data.astype(np.float64)
    t_vis = (t_occ > 0).astype(np.float64)

    q2 = np.empty_like(q1)
    for b in range(B):
        for n in range(N):
            q2[b, n] = sample_student_query(t_pos[b, n], t_vis[b, n], q1[b, n], cfg.q1_equals_q2_prob, rng, (H, W))

    deg = DegradationConfig(use_jpeg=cfg.use_jpeg, use_affine=cfg.use_affine)
    views, q2w, scale, offset = [], [], [], []
    for b in range(B):
        v, qw, seq = make_student_view(videos[b], q2[b], rng, deg)
        views.append(v)
        q2w.append(qw)
        scale.append(np.stack([seq.scale_x, seq.scale_y], axis=-1))
        offset.append(np.stack([seq.cx, seq.cy], axis=-1))
    views = np.stack(views)
    q2w = np.stack(q2w)
    scale = np.stack(scale)[:, None]  # B x 1 x T x 2
    offset = np.stack(offset)[:, None]

    s_outs = track(views, q2w, student)
    mapped = []
    for o in s_outs:
        pos = dc.div(dc.sub(o.positions, dc.constant(offset, o.positions)), dc.constant(scale, o.positions))
        mapped.append(type(o)(pos, o.occlusion, o.uncertainty))

    s_final = mapped[-1]
    labels = pseudo_labels_batch(t_pos, t_occ, s_final.positions.data, loss_cfg)
    if t_pos_tensor is not None:
        labels = _SiameseLabels(labels, t_pos_tensor)

    same = np.all(q1 == q2, axis=-1)
    if cfg.cycle_filter:
        cyc = cycle_masks_batch(s_final.positions.data, s_final.occlusion.data, q1, loss_cfg)
        masks = np.where(same, 1.0, cyc)
    else:
        masks = np.ones((B, N))

    per_track = ssl_loss_per_track(mapped, labels, loss_cfg, confidence_filter=cfg.confidence_filter)
    loss = total_ssl(per_track, masks)
    names = student.names()
    leaves = [student.tensors[k] for k in names]
    grads = dict(zip(names, dc.backward(loss, leaves)))
    tg = 0.0
    if t_pos_tensor is not None:
        tg = float(np.linalg.norm(dc.backward(loss, [t_pos_tensor])[0]))
    return SSLResult(float(loss.data), grads, float(masks.mean()), tg)


class _SiameseLabels(PseudoLabels):
    """Pseudo-labels whose positions stay attached to the teacher branch's graph."""

    def __init__(self, base: PseudoLabels, positions: dc.Tensor):
        self.p_T = positions
        self.o_T = base.o_T
        self.u_T = base.u_T
        self.occ_logits = base.occ_logits


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: ModelParams
    teacher: ModelParams | None
    logs: list[dict]
    losses: list[tuple[float, float]]  # per step (sup, ssl); nan where skipped or disabled
    skipped: int
    opt_sup: Adam
    opt_ssl: Adam


def _finite(grads: dict[str, np.ndarray]) -> bool:
    return all(np.isfinite(g).all() for g in grads.values())


def train(
    cfg: TrainConfig,
    labeled: Sequence[Scene],
    unlabeled: Sequence[np.ndarray] = (),
    init: ModelParams | None = None,
    out_dir: str | Path | None = None,
    eval_fn: Callable[[ModelParams, int], dict] | None = None,
    loss_cfg: LossConfig | None = None,
    teacher_init: ModelParams | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` steps; see the module docstring for the update rule.

    ``init`` seeds the student (and the teacher, unless ``teacher_init`` is
    given). Logs go to ``out_dir/log.jsonl`` when ``out_dir`` is set.
    """
    cfg.validate()
    if not labeled:
        raise ValueError("no labeled scenes")
    ssl_on = cfg.ssl_enabled and cfg.steps > 0
    if ssl_on and not unlabeled:
        raise ValueError("ssl enabled but no unlabeled clips")
    if init is None:
        from .tracker import init_params

        init = init_params(cfg.seed)
    loss_cfg = loss_cfg or LossConfig(resolution=cfg.resolution)
    student = init.copy()
    teacher = (teacher_init or init).copy(requires_grad=False)
    opt_sup = Adam.zeros_like(student)
    opt_ssl = Adam.zeros_like(student)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "log.jsonl"
        log_path.write_text("")

    logs: list[dict] = []
    losses: list[tuple[float, float]] = []
    skipped = 0
    window: dict[str, list[float]] = {"sup": [], "ssl": [], "mask": []}
    for step in range(cfg.steps):
        lr = lr_at(step, cfg.steps, cfg.peak_lr, cfg.warmup_steps)
        lr_ssl = ssl_lr_at(step, cfg.steps, cfg.peak_lr, cfg.warmup_steps)
        try:
            sup_loss, g_sup = supervised_step(student, cfg, loss_cfg, supervised_batch(labeled, cfg, step))
            ssl_res = None
            if ssl_on:
                vids = unlabeled_batch(unlabeled, cfg, step)
                ssl_res = ssl_step(student, teacher, vids, cfg, loss_cfg, make_rng(cfg.seed, "ssl-step", step))
            ok = np.isfinite(sup_loss) and _finite(g_sup)
            if ssl_res is not None:
                ok = ok and np.isfinite(ssl_res.loss) and _finite(ssl_res.grads)
            if not ok:
                raise dc.NonFiniteError("non-finite loss or gradient")
        except dc.NonFiniteError as exc:
            skipped += 1
            log.warning("step %d skipped: %s", step, exc)
            losses.append((float("nan"), float("nan")))
            continue

        g_sup, _ = clip_grads(g_sup, cfg.grad_clip)
        delta = opt_sup.step(g_sup, lr, cfg.lr_multipliers)
        if ssl_res is not None:
            g_ssl, _ = clip_grads(ssl_res.grads, cfg.grad_clip)
            d_ssl = opt_ssl.step(g_ssl, lr_ssl, cfg.lr_multipliers)
            delta = {k: delta[k] + d_ssl[k] for k in delta}
        new = {k: (v + delta[k]).astype(v.dtype) for k, v in student.arrays().items()}
        for k, v in new.items():
            student.tensors[k].data = v
        if ssl_on and not cfg.siamese_mode:
            ema = ema_update(teacher.arrays(), new, cfg.ema_decay)
            for k, v in ema.items():
                teacher.tensors[k].data = v

        ssl_val = ssl_res.loss if ssl_res is not None else float("nan")
        losses.append((sup_loss, ssl_val))
        window["sup"].append(sup_loss)
        if ssl_res is not None:
            window["ssl"].append(ssl_res.loss)
            window["mask"].append(ssl_res.mask_rate)

        last = step == cfg.steps - 1
        if (cfg.log_every and (step + 1) % cfg.log_every == 0) or last:
            rec = {
                "step": step + 1,
                "lr": lr,
                "ssl_lr": lr_ssl if ssl_on else 0.0,
                "sup_loss": float(np.mean(window["sup"])) if window["sup"] else None,
                "ssl_loss": float(np.mean(window["ssl"])) if window["ssl"] else None,
                "mask_rate": float(np.mean(window["mask"])) if window["mask"] else None,
                "skipped": skipped,
            }
            if eval_fn is not None:
                rec["eval"] = eval_fn(student, step + 1)
            window = {"sup": [], "ssl": [], "mask": []}
            logs.append(rec)
            log.info("%s", json.dumps(rec))
            if out is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if out is not None and cfg.checkpoint_every and ((step + 1) % cfg.checkpoint_every == 0 or last):
            _save(out / f"ckpt_{step + 1:06d}.btap", student, teacher, opt_sup, opt_ssl, cfg, step + 1)

    if cfg.steps and skipped / cfg.steps > cfg.max_skip_rate:
        raise TrainingError(f"{skipped}/{cfg.steps} steps skipped for non-finite values")
    if out is not None:
        _save(out / "final.btap", student, teacher, opt_sup, opt_ssl, cfg, cfg.steps)
    return TrainResult(student, teacher if ssl_on else None, logs, losses, skipped, opt_sup, opt_ssl)


def _save(path: Path, student, teacher, opt_sup: Adam, opt_ssl: Adam, cfg: TrainConfig, step: int) -> None:
    extra = {f"teacher/{k}": v for k, v in teacher.arrays().items()}
    extra.update(opt_sup.state("opt/sup/"))
    extra.update(opt_ssl.state("opt/ssl/"))
    save_checkpoint(path, student, extra=extra, meta={"train": cfg.to_dict(), "step": step})

