"""A compact differentiable point tracker.

Per-frame 2D conv features at two strides feed a global cost volume whose
spatial soft-argmax gives the initial track; shared refinement iterations then
read local correlations around the current estimate, mix them over time with
1D convolutions, and add position/logit updates. Queries never interact, and
frame features depend on their own frame only.

Feature cell ``j`` at stride ``s`` is centred on pixel ``s * j`` (pixel-center
convention), so a pixel coordinate maps to feature coordinates by ``/ s``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .rng import make_rng
from .synthdata import QueryPoint

PARAM_BUDGET = 200_000


@dataclass(frozen=True)
class ModelConfig:
    fine_dim: int = 16  # stride-2 features
    mid_dim: int = 32
    feature_dim: int = 32  # stride-4 features
    hidden_dim: int = 48
    iterations: int = 2  # K: initial estimate + K-1 refinements
    temperature: float = 0.05
    fine_radius: int = 2  # (2r+1)^2 window at stride 2
    coarse_radius: int = 1
    delta_scale: float = 2.0  # px per unit of refinement output
    dtype: str = "float32"

    @property
    def stride(self) -> int:
        return 4

    def validate(self) -> None:
        if self.iterations < 2:
            raise ValueError("need at least 2 iterations (init + refinement)")
        if not 32 <= self.feature_dim <= 64:
            raise ValueError("feature_dim must be in [32, 64]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def leaves(self) -> list[Tensor]:
        return [self.tensors[k] for k in self.names()]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self.tensors[k].data for k in self.names()}

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray], requires_grad: bool = True):
        dtype = np.dtype(config.dtype)
        return cls(config, {k: dc.tensor(np.array(v, dtype=dtype), requires_grad) for k, v in arrays.items()})

    def copy(self, requires_grad: bool = True) -> "ModelParams":
        return ModelParams.from_arrays(self.config, {k: v.copy() for k, v in self.arrays().items()}, requires_grad)

    def astype(self, dtype: str) -> "ModelParams":
        cfg = ModelConfig(**{**asdict(self.config), "dtype": dtype})
        return ModelParams.from_arrays(cfg, self.arrays())


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    n_in = (2 * cfg.fine_radius + 1) ** 2 + (2 * cfg.coarse_radius + 1) ** 2 + 2
    return {
        "backbone.conv1.w": (3, 3, 3, cfg.fine_dim),
        "backbone.conv1.b": (cfg.fine_dim,),
        "backbone.conv2.w": (3, 3, cfg.fine_dim, cfg.fine_dim),
        "backbone.conv2.b": (cfg.fine_dim,),
        "backbone.conv3.w": (3, 3, cfg.fine_dim, cfg.mid_dim),
        "backbone.conv3.b": (cfg.mid_dim,),
        "backbone.conv4.w": (3, 3, cfg.mid_dim, cfg.feature_dim),
        "backbone.conv4.b": (cfg.feature_dim,),
        "heads.init.w": (2, 2),
        "heads.init.b": (2,),
        "refine.conv1.w": (3, n_in, cfg.hidden_dim),
        "refine.conv1.b": (cfg.hidden_dim,),
        "refine.conv2.w": (3, cfg.hidden_dim, cfg.hidden_dim),
        "refine.conv2.b": (cfg.hidden_dim,),
        "refine.out.w": (1, cfg.hidden_dim, 4),
        "refine.out.b": (4,),
    }


def init_params(seed: int, config: ModelConfig | None = None) -> ModelParams:
    """He-normal convs, zero biases, and a zero refinement output layer."""
    cfg = config or ModelConfig()
    cfg.validate()
    rng = make_rng(seed, "init")
    arrays: dict[str, np.ndarray] = {}
    for name, shape in sorted(param_shapes(cfg).items()):
        if name.endswith(".b"):
            arr = np.zeros(shape)
        elif name == "refine.out.w":
            arr = np.zeros(shape)
        elif name == "heads.init.w":
            arr = rng.normal(0.0, 0.5, size=shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        arrays[name] = arr
    params = ModelParams.from_arrays(cfg, arrays)
    if params.count() > PARAM_BUDGET:
        raise ValueError(f"model has {params.count()} parameters, budget is {PARAM_BUDGET}")
    return params


# ---------------------------------------------------------------------------


@dataclass
class IterationOutput:
    positions: Tensor  # B x N x T x 2
    occlusion: Tensor  # B x N x T
    uncertainty: Tensor  # B x N x T


@dataclass
class TrajectoryPrediction:
    """Per-iteration positions and logits for one query; the last entry is the answer."""

    positions: list[np.ndarray]  # K x (T x 2)
    occlusion: list[np.ndarray]  # K x T
    uncertainty: list[np.ndarray]  # K x T

    @property
    def p(self) -> np.ndarray:
        return self.positions[-1]

    @property
    def o(self) -> np.ndarray:
        return self.occlusion[-1]

    @property
    def u(self) -> np.ndarray:
        return self.uncertainty[-1]


@dataclass
class Features:
    fine: Tensor  # (B*T) x H/2 x W/2 x C1, unit norm
    coarse: Tensor  # (B*T) x H/4 x W/4 x D, unit norm
    B: int
    T: int


def extract_features(videos: Tensor, params: ModelParams) -> Features:
    """Backbone applied to every frame independently."""
    P = params.tensors
    B, T, H, W, _ = videos.shape
    x = dc.reshape(videos, (B * T, H, W, 3))
    x = dc.sub(dc.mul(x, 2.0), 1.0)
    x = dc.relu(dc.add(dc.conv2d(x, P["backbone.conv1.w"], 2), P["backbone.conv1.b"]))
    fine = dc.relu(dc.add(dc.conv2d(x, P["backbone.conv2.w"], 1), P["backbone.conv2.b"]))
    x = dc.relu(dc.add(dc.conv2d(fine, P["backbone.conv3.w"], 2), P["backbone.conv3.b"]))
    coarse = dc.add(dc.conv2d(x, P["backbone.conv4.w"], 1), P["backbone.conv4.b"])
    return Features(dc.l2_normalize(fine), dc.l2_normalize(coarse), B, T)


def _window(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1, dtype=np.float64)
    gy, gx = np.meshgrid(r, r, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def _local_correlation(field: Tensor, qfeat: Tensor, pos: Tensor, stride: int, radius: int, B: int, T: int) -> Tensor:
    """Correlation of each query feature with ``field`` on a window around ``pos``.

    ``pos`` is B x N x T x 2 in pixels; returns B x N x T x (2r+1)^2.
    """
    N = pos.shape[1]
    offs = _window(radius)
    K = offs.shape[0]
    c = field.shape[-1]
    p = dc.reshape(dc.mul(pos, 1.0 / stride), (B, N, T, 1, 2))
    pts = dc.reshape(dc.add(p, dc.constant(offs.reshape(1, 1, 1, K, 2), pos)), (B * N * T * K, 2))
    frame = np.broadcast_to((np.arange(B)[:, None, None, None] * T + np.arange(T)[None, None, :, None]), (B, N, T, K))
    samp = dc.reshape(dc.sample_frames(field, frame, pts), (B, N, T, K, c))
    q = dc.reshape(qfeat, (B, N, 1, 1, c))
    return dc.sum_(dc.mul(samp, q), axis=-1)


def _query_features(field: Tensor, qxy: np.ndarray, qidx: np.ndarray, stride: int, B: int, N: int) -> Tensor:
    pts = dc.constant((qxy / stride).reshape(B * N, 2), field)
    return dc.reshape(dc.sample_frames(field, qidx.reshape(-1), pts), (B, N, field.shape[-1]))


def track(videos, queries: np.ndarray, params: ModelParams) -> list[IterationOutput]:
    """Batched forward pass.

    ``videos`` is B x T x H x W x 3 in [0, 1]; ``queries`` is B x N x 3 rows of
    ``(x, y, t)``. Returns one ``IterationOutput`` per iteration.
    """
    cfg = params.config
    dtype = np.dtype(cfg.dtype)
    if not isinstance(videos, Tensor):
        videos = dc.tensor(np.asarray(videos, dtype=dtype))
    queries = np.asarray(queries, dtype=np.float64)
    B, T, H, W, _ = videos.shape
    N = queries.shape[1]
    ts = queries[..., 2].astype(np.int64)
    if (ts < 0).any() or (ts >= T).any():
        raise IndexError("query frame out of range")
    qxy = queries[..., :2]
    if (qxy[..., 0] < -0.5).any() or (qxy[..., 0] > W - 0.5).any() or (qxy[..., 1] < -0.5).any() or (
        qxy[..., 1] > H - 0.5
    ).any():
        raise ValueError("query outside frame")
    P = params.tensors
    feats = extract_features(videos, params)
    qidx = np.arange(B)[:, None] * T + ts
    q_coarse = _query_features(feats.coarse, qxy, qidx, 4, B, N)
    q_fine = _query_features(feats.fine, qxy, qidx, 2, B, N)

    # global cost volume and soft-argmax
    coarse = feats.coarse
    h, w, d = coarse.shape[1:]
    fmap = dc.reshape(coarse, (B, T * h * w, d))
    cost = dc.matmul(fmap, dc.transpose(q_coarse, (0, 2, 1)))  # B (T h w) N
    cost = dc.transpose(dc.reshape(cost, (B, T, h * w, N)), (0, 3, 1, 2))  # B N T hw
    prob = dc.softmax2d(dc.reshape(dc.mul(cost, 1.0 / cfg.temperature), (B, N, T, h, w)))
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=-1) * feats_stride(cfg)
    pos = dc.matmul(dc.reshape(prob, (B, N, T, h * w)), dc.constant(grid, cost))
    stats = dc.stack([dc.max_(cost, axis=-1), dc.mean(cost, axis=-1)], axis=-1)  # B N T 2
    logits = dc.add(dc.matmul(stats, P["heads.init.w"]), P["heads.init.b"])
    occ = logits[..., 0]
    unc = logits[..., 1]
    outputs = [IterationOutput(pos, occ, unc)]

    for _ in range(cfg.iterations - 1):
        fine_corr = _local_correlation(feats.fine, q_fine, pos, 2, cfg.fine_radius, B, T)
        coarse_corr = _local_correlation(feats.coarse, q_coarse, pos, 4, cfg.coarse_radius, B, T)
        state = dc.concat(
            [fine_corr, coarse_corr, dc.reshape(occ, (B, N, T, 1)), dc.reshape(unc, (B, N, T, 1))], axis=-1
        )
        x = dc.reshape(state, (B * N, T, state.shape[-1]))
        x = dc.relu(dc.add(dc.conv1d(x, P["refine.conv1.w"]), P["refine.conv1.b"]))
        x = dc.relu(dc.add(dc.conv1d(x, P["refine.conv2.w"]), P["refine.conv2.b"]))
        delta = dc.add(dc.conv1d(x, P["refine.out.w"]), P["refine.out.b"])
        delta = dc.reshape(delta, (B, N, T, 4))
        pos = dc.add(pos, dc.mul(delta[..., 0:2], cfg.delta_scale))
        occ = dc.add(occ, delta[..., 2])
        unc = dc.add(unc, delta[..., 3])
        outputs.append(IterationOutput(pos, occ, unc))
    return outputs


def feats_stride(cfg: ModelConfig) -> int:
    return cfg.stride


def queries_array(queries: Sequence[QueryPoint]) -> np.ndarray:
    return np.array([[q.x, q.y, q.t] for q in queries], dtype=np.float64)


def forward(video: np.ndarray, queries: Sequence[QueryPoint], params: ModelParams) -> list[TrajectoryPrediction]:
    """Track each query through ``video`` (T x H x W x 3) without recording gradients."""
    if len(queries) == 0:
        return []
    with dc.no_grad():
        outs = track(np.asarray(video)[None], queries_array(queries)[None], params)
    return to_predictions(outs, 0)


def to_predictions(outs: list[IterationOutput], b: int = 0) -> list[TrajectoryPrediction]:
    N = outs[0].positions.shape[1]
    return [
        TrajectoryPrediction(
            positions=[o.positions.data[b, n].astype(np.float64) for o in outs],
            occlusion=[o.occlusion.data[b, n].astype(np.float64) for o in outs],
            uncertainty=[o.uncertainty.data[b, n].astype(np.float64) for o in outs],
        )
        for n in range(N)
    ]


# ---------------------------------------------------------------------------
# checkpoint container
#
# "BTAP" | u32 version | u32 count | per entry:
#   u32 name_len | name (utf-8) | u8 dtype tag | u32 rank | u32 dims[rank] | payload (LE)

MAGIC = b"BTAP"
CHECKPOINT_VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("u1")}
CONFIG_KEY = "__config__"
TEACHER_PREFIX = "teacher/"
OPT_PREFIX = "opt/"
RESERVED_PREFIXES = ("__", TEACHER_PREFIX, OPT_PREFIX)


class CheckpointError(Exception):
    pass


def write_container(path: str | Path, entries: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        tag = 1 if arr.dtype == np.uint8 else 0
        arr = arr.astype(DTYPE_TAGS[tag])
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_container(path: str | Path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + n].decode("utf-8")
            off += n
            tag, rank = struct.unpack_from("<BI", raw, off)
            off += 5
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            dt = DTYPE_TAGS[tag]
            size = int(np.prod(dims)) * dt.itemsize
            out[name] = np.frombuffer(raw[off : off + size], dtype=dt).reshape(dims).copy()
            off += size
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from exc
    return out


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    extra: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    entries: dict[str, np.ndarray] = dict(params.arrays())
    for k, v in (extra or {}).items():
        if not k.startswith(RESERVED_PREFIXES):
            raise ValueError(f"extra entry {k!r} must use a reserved prefix")
        entries[k] = v
    doc = {"model": asdict(params.config), **(meta or {})}
    entries[CONFIG_KEY] = np.frombuffer(json.dumps(doc, sort_keys=True).encode(), dtype=np.uint8)
    write_container(path, entries)


@dataclass
class Checkpoint:
    params: ModelParams
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def load_checkpoint(path: str | Path) -> Checkpoint:
    entries = read_container(path)
    if CONFIG_KEY not in entries:
        raise CheckpointError(f"{path}: missing config entry")
    doc = json.loads(entries.pop(CONFIG_KEY).tobytes().decode())
    cfg = ModelConfig(**doc.pop("model"))
    arrays = {k: v for k, v in entries.items() if not k.startswith(RESERVED_PREFIXES)}
    extra = {k: v for k, v in entries.items() if k.startswith(RESERVED_PREFIXES)}
    expected = param_shapes(cfg)
    for k, shape in expected.items():
        if k not in arrays or tuple(arrays[k].shape) != shape:
            raise CheckpointError(f"{path}: parameter {k} missing or misshapen")
    return Checkpoint(ModelParams.from_arrays(cfg, arrays), extra, doc)
