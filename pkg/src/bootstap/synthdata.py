"""Synthetic "Kubric-mini" videos with analytic point tracks.

Scenes are layered 2.5D: a textured background plus rigid textured sprites
(ellipses and regular polygons) that move with constant linear and angular
velocity. Each layer has a constant depth, so occlusion is decided exactly by
which layer is frontmost at a pixel. Tracks are computed from the rigid
motion, never estimated from pixels.

Positions use the pixel-center convention: pixel ``(row i, col j)`` has its
center at ``(x, y) = (j, i)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .rng import make_rng

FORMAT_VERSION = 1
BACKGROUND_DEPTH = 100.0
TEXTURE_FAMILIES = ("checker", "noise", "gradient")


@dataclass(frozen=True)
class QueryPoint:
    """A pixel position ``(x, y)`` on frame ``t``."""

    x: float
    y: float
    t: int

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass
class GroundTruthTrack:
    p: np.ndarray  # T x 2, pixels
    o: np.ndarray  # T, 1 = occluded

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.o = np.asarray(self.o, dtype=np.int64)
        if self.p.ndim != 2 or self.p.shape[1] != 2 or self.o.shape != (self.p.shape[0],):
            raise ValueError("track needs p of shape T x 2 and o of shape T")
        if not np.isfinite(self.p).all():
            raise ValueError("track positions must be finite")
        if not np.isin(self.o, (0, 1)).all():
            raise ValueError("occlusion flags must be 0 or 1")


@dataclass
class LabeledQuery:
    """A sampled query and the ground-truth track it should produce.

    After snapping, ``query`` sits one pixel off the track (on the background)
    while ``track`` still follows the foreground surface.
    """

    query: QueryPoint
    track: GroundTruthTrack
    layer: int
    snapped: bool = False


@dataclass
class SceneConfig:
    T: int = 16
    H: int = 64
    W: int = 64
    sprite_count: int = 3
    texture_family: str = "checker"
    speed_range: tuple[float, float] = (0.0, 1.5)  # px / frame
    angular_range: tuple[float, float] = (-0.05, 0.05)  # rad / frame
    size_range: tuple[float, float] = (7.0, 14.0)  # sprite radius, px
    background_speed: float = 0.5  # max px / frame
    n_tracks: int = 48
    object_bias: float = 0.8
    snap: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.H < 16 or self.W < 16:
            raise ValueError("H and W must be >= 16")
        if self.sprite_count < 1:
            raise ValueError("sprite_count must be >= 1")
        if self.texture_family not in TEXTURE_FAMILIES:
            raise ValueError(f"unknown texture family {self.texture_family!r}")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ValueError("size_range must satisfy 0 < lo <= hi")
        if 2 * hi > min(self.H, self.W):
            raise ValueError("sprite larger than frame")
        if not 0.0 <= self.object_bias <= 1.0:
            raise ValueError("object_bias must be in [0, 1]")


# ---------------------------------------------------------------------------
# textures: functions of layer-local coordinates (u, v) -> RGB in [0, 1]


@dataclass
class Texture:
    family: str
    colors: np.ndarray  # k x 3
    period: float
    angle: float
    grid: np.ndarray | None = None  # noise lattice, g x g x 3

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        ca, sa = np.cos(self.angle), np.sin(self.angle)
        ur, vr = ca * u + sa * v, -sa * u + ca * v
        if self.family == "checker":
            parity = (np.floor(ur / self.period) + np.floor(vr / self.period)) % 2
            return np.where(parity[..., None] > 0, self.colors[0], self.colors[1])
        if self.family == "gradient":
            a = 0.5 + 0.5 * np.sin(2 * np.pi * ur / self.period)
            b = 0.5 + 0.5 * np.sin(2 * np.pi * vr / (1.7 * self.period) + 1.0)
            return (
                self.colors[0] * (a * b)[..., None]
                + self.colors[1] * ((1 - a) * b)[..., None]
                + self.colors[2] * (1 - b)[..., None]
            )
        # value noise on a periodic lattice with smoothstep blending
        g = self.grid.shape[0]
        gu, gv = ur / self.period, vr / self.period
        iu, iv = np.floor(gu), np.floor(gv)
        fu, fv = gu - iu, gv - iv
        su, sv = fu * fu * (3 - 2 * fu), fv * fv * (3 - 2 * fv)
        iu, iv = iu.astype(np.int64) % g, iv.astype(np.int64) % g
        ju, jv = (iu + 1) % g, (iv + 1) % g
        c00, c10 = self.grid[iv, iu], self.grid[iv, ju]
        c01, c11 = self.grid[jv, iu], self.grid[jv, ju]
        top = c00 * (1 - su)[..., None] + c10 * su[..., None]
        bot = c01 * (1 - su)[..., None] + c11 * su[..., None]
        return top * (1 - sv)[..., None] + bot * sv[..., None]


def _sample_texture(family: str, rng: np.random.Generator) -> Texture:
    colors = rng.uniform(0.05, 0.95, size=(3, 3))
    angle = rng.uniform(0, np.pi)
    if family == "checker":
        # keep the two checker colours apart so edges are visible
        while np.abs(colors[0] - colors[1]).sum() < 0.6:
            colors[:2] = rng.uniform(0.05, 0.95, size=(2, 3))
        return Texture(family, colors, period=rng.uniform(3.0, 6.0), angle=angle)
    if family == "gradient":
        return Texture(family, colors, period=rng.uniform(6.0, 12.0), angle=angle)
    grid = rng.uniform(0.0, 1.0, size=(16, 16, 3))
    return Texture(family, colors, period=rng.uniform(2.5, 4.5), angle=angle, grid=grid)


# ---------------------------------------------------------------------------
# layers


@dataclass
class Layer:
    """One rigid layer. Layer 0 is the background (translation only)."""

    layer_id: int
    depth: float
    texture: Texture
    center0: np.ndarray  # position at t=0
    velocity: np.ndarray  # px / frame
    angle0: float = 0.0
    angular_velocity: float = 0.0
    shape: str = "plane"  # plane | ellipse | polygon
    radii: tuple[float, float] = (0.0, 0.0)
    sides: int = 0

    def pose(self, t) -> tuple[np.ndarray, np.ndarray]:
        t = np.asarray(t, dtype=np.float64)
        center = self.center0 + np.multiply.outer(t, self.velocity)
        angle = self.angle0 + self.angular_velocity * t
        return center, angle

    def to_local(self, xy: np.ndarray, t: float) -> np.ndarray:
        c, a = self.pose(t)
        d = np.asarray(xy, dtype=np.float64) - c
        ca, sa = np.cos(a), np.sin(a)
        return np.stack([ca * d[..., 0] + sa * d[..., 1], -sa * d[..., 0] + ca * d[..., 1]], axis=-1)

    def to_world(self, local: np.ndarray, ts: np.ndarray) -> np.ndarray:
        """Positions of a local point at each frame in ``ts`` (``len(ts) x 2``)."""
        c, a = self.pose(ts)
        ca, sa = np.cos(a), np.sin(a)
        u, v = local[0], local[1]
        return np.stack([c[:, 0] + ca * u - sa * v, c[:, 1] + sa * u + ca * v], axis=-1)

    def inside(self, local: np.ndarray) -> np.ndarray:
        u, v = local[..., 0], local[..., 1]
        if self.shape == "plane":
            return np.ones(u.shape, dtype=bool)
        if self.shape == "ellipse":
            a, b = self.radii
            return (u / a) ** 2 + (v / b) ** 2 <= 1.0
        r = self.radii[0]
        n = self.sides
        # regular polygon: distance to each edge normal
        ang = np.arctan2(v, u)
        sector = np.floor(ang / (2 * np.pi / n) + 0.5) * (2 * np.pi / n)
        proj = u * np.cos(sector) + v * np.sin(sector)
        return proj <= r * np.cos(np.pi / n)


@dataclass
class Scene:
    video: np.ndarray  # T x H x W x 3 float32 in [0, 1]
    tracks: list[GroundTruthTrack]
    depth: np.ndarray | None  # T x H x W, smaller = nearer
    segmentation: np.ndarray | None  # T x H x W layer ids
    queries: list[QueryPoint] = field(default_factory=list)
    layers: list[Layer] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.video.shape[0]

    @property
    def H(self) -> int:
        return self.video.shape[1]

    @property
    def W(self) -> int:
        return self.video.shape[2]

    def track_of_pixel(self, x: int, y: int, t: int) -> tuple[GroundTruthTrack, int]:
        """Analytic track of the surface point visible at pixel ``(x, y)`` on frame ``t``."""
        if self.layers is None or self.segmentation is None:
            raise ValueError("scene has no analytic layers (loaded from disk?)")
        lid = int(self.segmentation[t, y, x])
        layer = self.layers[lid]
        local = layer.to_local(np.array([x, y], dtype=np.float64), t)
        p = layer.to_world(local, np.arange(self.T))
        return GroundTruthTrack(p, occlusion_flags(p, lid, self.segmentation)), lid


def occlusion_flags(p: np.ndarray, layer_id: int, segmentation: np.ndarray) -> np.ndarray:
    """1 where the layer is not frontmost at the rounded position or it is off-frame."""
    T, H, W = segmentation.shape
    xi = np.floor(p[:, 0] + 0.5).astype(np.int64)
    yi = np.floor(p[:, 1] + 0.5).astype(np.int64)
    inb = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
    o = np.ones(T, dtype=np.int64)
    ts = np.nonzero(inb)[0]
    o[ts] = (segmentation[ts, yi[ts], xi[ts]] != layer_id).astype(np.int64)
    return o


def _make_layers(cfg: SceneConfig, rng: np.random.Generator) -> list[Layer]:
    bg_dir = rng.uniform(0, 2 * np.pi)
    bg_speed = rng.uniform(0, cfg.background_speed)
    layers = [
        Layer(
            0,
            BACKGROUND_DEPTH,
            _sample_texture(cfg.texture_family, rng),
            center0=np.zeros(2),
            velocity=bg_speed * np.array([np.cos(bg_dir), np.sin(bg_dir)]),
        )
    ]
    # depths 25% apart so every sprite edge is a depth discontinuity
    ranks = rng.permutation(cfg.sprite_count)
    mid = (cfg.T - 1) / 2.0
    for k in range(cfg.sprite_count):
        depth = 10.0 * 1.25 ** ranks[k] * rng.uniform(0.98, 1.02)
        r = rng.uniform(*cfg.size_range)
        speed = rng.uniform(*cfg.speed_range)
        direction = rng.uniform(0, 2 * np.pi)
        vel = speed * np.array([np.cos(direction), np.sin(direction)])
        cmid = np.array([rng.uniform(r, cfg.W - 1 - r), rng.uniform(r, cfg.H - 1 - r)])
        shape = "ellipse" if rng.random() < 0.5 else "polygon"
        if shape == "ellipse":
            radii = (r, r * rng.uniform(0.6, 1.0))
            sides = 0
        else:
            radii = (r, r)
            sides = int(rng.integers(3, 7))
        layers.append(
            Layer(
                k + 1,
                depth,
                _sample_texture(cfg.texture_family, rng),
                center0=cmid - vel * mid,
                velocity=vel,
                angle0=rng.uniform(0, 2 * np.pi),
                angular_velocity=rng.uniform(*cfg.angular_range),
                shape=shape,
                radii=radii,
                sides=sides,
            )
        )
    return layers


def render(layers: list[Layer], T: int, H: int, W: int):
    """Rasterise layers at pixel centers; returns ``(video, depth, segmentation)``."""
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    grid = np.stack([xs, ys], axis=-1)
    video = np.zeros((T, H, W, 3))
    depth = np.zeros((T, H, W))
    seg = np.zeros((T, H, W), dtype=np.int64)
    order = sorted(layers, key=lambda layer: -layer.depth)
    for t in range(T):
        for layer in order:
            local = layer.to_local(grid, t)
            mask = layer.inside(local)
            if not mask.any():
                continue
            rgb = layer.texture(local[..., 0], local[..., 1])
            video[t][mask] = rgb[mask]
            depth[t][mask] = layer.depth
            seg[t][mask] = layer.layer_id
    video = np.round(np.clip(video, 0.0, 1.0) * 255.0) / 255.0
    return video.astype(np.float32), depth.astype(np.float32), seg


def generate_scene(cfg: SceneConfig) -> Scene:
    """Render a scene and sample ``cfg.n_tracks`` ground-truth tracks. Deterministic in ``cfg``."""
    cfg.validate()
    rng = make_rng(cfg.seed, "scene")
    layers = _make_layers(cfg, rng)
    video, depth, seg = render(layers, cfg.T, cfg.H, cfg.W)
    scene = Scene(video=video, tracks=[], depth=depth, segmentation=seg, layers=layers)
    scene.meta = {"texture_family": cfg.texture_family, "seed": int(cfg.seed)}
    if cfg.n_tracks > 0:
        qrng = make_rng(cfg.seed, "queries")
        labeled = sample_ground_truth_queries(scene, cfg.n_tracks, cfg.snap, qrng, object_bias=cfg.object_bias)
        scene.tracks = [lq.track for lq in labeled]
        scene.queries = [lq.query for lq in labeled]
    return scene


# ---------------------------------------------------------------------------
# query sampling with snap-to-occluder


def back_side_mask(depth_frame: np.ndarray) -> np.ndarray:
    """Pixels with a 3x3 neighbour nearer than 95% of their own depth."""
    nearest = ndimage.minimum_filter(depth_frame, size=3, mode="nearest")
    return nearest < 0.95 * depth_frame


def front_side_neighbors(depth_frame: np.ndarray, x: int, y: int) -> list[tuple[int, int]]:
    """In-frame 3x3 neighbours deeper than 105% of the depth at ``(x, y)``."""
    H, W = depth_frame.shape
    d = depth_frame[y, x]
    out = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            nx, ny = x + dx, y + dy
            if 0 <= nx < W and 0 <= ny < H and depth_frame[ny, nx] > 1.05 * d:
                out.append((nx, ny))
    return out


def snap_query(depth_frame: np.ndarray, x: int, y: int, rng: np.random.Generator) -> tuple[int, int, bool]:
    """With probability 0.5, move a front-side query onto a random deeper neighbour."""
    nbrs = front_side_neighbors(depth_frame, x, y)
    if nbrs and rng.random() < 0.5:
        nx, ny = nbrs[int(rng.integers(len(nbrs)))]
        return nx, ny, True
    return x, y, False


def sample_ground_truth_queries(
    scene: Scene,
    n: int,
    snap: bool,
    rng: np.random.Generator,
    object_bias: float = 0.8,
) -> list[LabeledQuery]:
    """Sample ``n`` labeled queries, biased toward sprites.

    With ``snap`` the back side of occlusion boundaries is never sampled, and
    front-side samples are moved onto a deeper neighbour half of the time
    while keeping the foreground track.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if scene.depth is None or scene.segmentation is None:
        raise ValueError("query sampling needs depth and segmentation")
    if not (scene.segmentation > 0).any():
        raise ValueError("no visible sprite pixels in any frame")
    T, H, W = scene.segmentation.shape
    out: list[LabeledQuery] = []
    while len(out) < n:
        t = int(rng.integers(T))
        seg_t, depth_t = scene.segmentation[t], scene.depth[t]
        allowed = ~back_side_mask(depth_t) if snap else np.ones((H, W), dtype=bool)
        if rng.random() < object_bias:
            cand = allowed & (seg_t > 0)
            if not cand.any():
                continue
        else:
            cand = allowed
        ys, xs = np.nonzero(cand)
        k = int(rng.integers(len(xs)))
        x, y = int(xs[k]), int(ys[k])
        track, lid = scene.track_of_pixel(x, y, t)
        qx, qy, snapped = (x, y, False)
        if snap:
            qx, qy, snapped = snap_query(depth_t, x, y, rng)
        out.append(LabeledQuery(QueryPoint(float(qx), float(qy), t), track, lid, snapped))
    return out


# ---------------------------------------------------------------------------
# domains


DOMAINS = {
    # labeled source domain: hard-edged / smooth periodic textures, gentle motion
    "A": dict(
        families=("checker", "gradient"),
        speed_range=(0.0, 1.5),
        angular_range=(-0.03, 0.03),
        background_speed=0.5,
    ),
    # unlabeled target domain: value-noise textures, faster motion and rotation
    "B": dict(
        families=("noise",),
        speed_range=(0.5, 2.0),
        angular_range=(-0.06, 0.06),
        background_speed=1.0,
    ),
}


def domain_config(domain: str, seed: int, **overrides) -> SceneConfig:
    """Scene config for clip ``seed`` of ``domain`` ('A' or 'B')."""
    spec = DOMAINS[domain]
    rng = make_rng(seed, "domain", domain)
    fam = spec["families"][int(rng.integers(len(spec["families"])))]
    kw = dict(
        texture_family=fam,
        speed_range=spec["speed_range"],
        angular_range=spec["angular_range"],
        background_speed=spec["background_speed"],
        sprite_count=int(rng.integers(2, 5)),
        seed=seed,
    )
    kw.update(overrides)
    return SceneConfig(**kw)


# ---------------------------------------------------------------------------
# interchange format


def save_scene(scene: Scene, out_dir: str | Path, labeled: bool = True, with_depth: bool = True) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    T, H, W = scene.T, scene.H, scene.W
    meta = {"T": T, "H": H, "W": W, "format_version": FORMAT_VERSION}
    meta.update({k: v for k, v in scene.meta.items() if k not in meta})
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    rgb8 = np.round(np.clip(scene.video, 0, 1) * 255.0).astype(np.uint8)
    (out / "frames.rgb8").write_bytes(rgb8.tobytes(order="C"))
    if labeled:
        doc = {
            "points": [tr.p.tolist() for tr in scene.tracks],
            "occluded": [tr.o.astype(int).tolist() for tr in scene.tracks],
        }
        if scene.queries:
            doc["queries"] = [[q.x, q.y, q.t] for q in scene.queries]
        (out / "tracks.json").write_text(json.dumps(doc))
    if with_depth and scene.depth is not None:
        (out / "depth.f32").write_bytes(scene.depth.astype("<f4").tobytes(order="C"))


class DataError(Exception):
    """A clip directory is missing or malformed."""


def load_scene(clip_dir: str | Path) -> Scene:
    d = Path(clip_dir)
    try:
        meta = json.loads((d / "meta.json").read_text())
        T, H, W = int(meta["T"]), int(meta["H"]), int(meta["W"])
        raw = np.frombuffer((d / "frames.rgb8").read_bytes(), dtype=np.uint8)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{d}: unreadable clip ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{d}: unsupported format version {meta.get('format_version')}")
    if raw.size != T * H * W * 3:
        raise DataError(f"{d}: frames.rgb8 has {raw.size} bytes, expected {T * H * W * 3}")
    video = (raw.reshape(T, H, W, 3).astype(np.float32) / 255.0).astype(np.float32)
    tracks: list[GroundTruthTrack] = []
    queries: list[QueryPoint] = []
    tp = d / "tracks.json"
    if tp.exists():
        try:
            doc = json.loads(tp.read_text())
            tracks = [GroundTruthTrack(np.array(p), np.array(o)) for p, o in zip(doc["points"], doc["occluded"])]
            queries = [QueryPoint(float(x), float(y), int(t)) for x, y, t in doc.get("queries", [])]
        except (ValueError, KeyError) as exc:
            raise DataError(f"{d}: bad tracks.json ({exc})") from exc
        for tr in tracks:
            if tr.p.shape[0] != T:
                raise DataError(f"{d}: track length {tr.p.shape[0]} != T={T}")
    depth = None
    dp = d / "depth.f32"
    if dp.exists():
        draw = np.frombuffer(dp.read_bytes(), dtype="<f4")
        if draw.size != T * H * W:
            raise DataError(f"{d}: depth.f32 has wrong size")
        depth = draw.reshape(T, H, W).astype(np.float32)
    extra = {k: v for k, v in meta.items() if k not in ("T", "H", "W", "format_version")}
    extra["name"] = d.name
    return Scene(video=video, tracks=tracks, depth=depth, segmentation=None, queries=queries, meta=extra)


def load_clips(root: str | Path) -> list[Scene]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: dataset directory missing")
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").exists())
    if not dirs:
        raise DataError(f"{root}: no clips found")
    return [load_scene(p) for p in dirs]


def scene_digest(scene: Scene) -> str:
    h = hashlib.sha256(np.ascontiguousarray(scene.video).tobytes())
    for tr in scene.tracks:
        h.update(tr.p.tobytes())
        h.update(tr.o.tobytes())
    return h.hexdigest()


def config_dict(cfg: SceneConfig) -> dict:
    return asdict(cfg)
