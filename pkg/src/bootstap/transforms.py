"""Student-view construction: smooth frame-wise affine zoom/pan plus JPEG.

Every coordinate here is in the pixel-center convention shared with
``diffcore.bilinear_sample``. Points and pixels are warped with the *same*
``AffineSequence``: ``resample_video`` gathers each destination pixel from
``invert_point`` of its own center, so a point moved by ``apply_point`` lands
on the pixel content it started on.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn, idctn

from .synthdata import QueryPoint

MIN_AREA = 0.6
MAX_AREA = 1.0


@dataclass(frozen=True)
class AffineSequence:
    """Per-frame map ``(x, y) -> (w_t/W * x + cx_t, h_t/H * y + cy_t)``.

    Built from start/end crop sizes and top-left corners; every per-frame
    parameter is the linear interpolation with weight ``t / (T - 1)``.
    """

    T: int
    H: int
    W: int
    size0: tuple[float, float]  # (H_0, W_0)
    size1: tuple[float, float]  # (H_{T-1}, W_{T-1})
    corner0: tuple[float, float]  # (C_0^x, C_0^y)
    corner1: tuple[float, float]
    h: np.ndarray = field(init=False, repr=False)
    w: np.ndarray = field(init=False, repr=False)
    cx: np.ndarray = field(init=False, repr=False)
    cy: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        alpha = self.alpha
        lerp = lambda a, b: (1.0 - alpha) * a + alpha * b  # noqa: E731
        object.__setattr__(self, "h", lerp(self.size0[0], self.size1[0]))
        object.__setattr__(self, "w", lerp(self.size0[1], self.size1[1]))
        object.__setattr__(self, "cx", lerp(self.corner0[0], self.corner1[0]))
        object.__setattr__(self, "cy", lerp(self.corner0[1], self.corner1[1]))

    @property
    def alpha(self) -> np.ndarray:
        return np.arange(self.T, dtype=np.float64) / (self.T - 1)

    @property
    def scale_x(self) -> np.ndarray:
        return self.w / self.W

    @property
    def scale_y(self) -> np.ndarray:
        return self.h / self.H

    @classmethod
    def identity(cls, T: int, H: int, W: int) -> "AffineSequence":
        return cls(T, H, W, (float(H), float(W)), (float(H), float(W)), (0.0, 0.0), (0.0, 0.0))

    def is_identity(self) -> bool:
        return bool(
            np.all(self.h == self.H) and np.all(self.w == self.W) and not self.cx.any() and not self.cy.any()
        )

    def apply(self, xy: np.ndarray, t) -> np.ndarray:
        """Vectorised ``Phi_t``; ``t`` broadcasts against ``xy[..., 0]``."""
        xy = np.asarray(xy, dtype=np.float64)
        t = np.asarray(t)
        return np.stack(
            [self.scale_x[t] * xy[..., 0] + self.cx[t], self.scale_y[t] * xy[..., 1] + self.cy[t]], axis=-1
        )

    def invert(self, xy: np.ndarray, t) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        t = np.asarray(t)
        return np.stack(
            [(xy[..., 0] - self.cx[t]) / self.scale_x[t], (xy[..., 1] - self.cy[t]) / self.scale_y[t]], axis=-1
        )


def sample_crop_size(H: int, W: int, rng: np.random.Generator, area: float | None = None) -> tuple[float, float]:
    """Crop ``(height, width)`` covering ``area`` of the frame, aspect ratio biased toward 1."""
    A = rng.uniform(MIN_AREA, MAX_AREA) if area is None else area
    a1, a2 = rng.uniform(A, 1.0, size=2)
    h = (a1 + a2) / 2.0
    w = A / h
    return h * H, w * W


def sample_affine(T: int, H: int, W: int, rng: np.random.Generator, area: float | None = None) -> AffineSequence:
    """Draw from the smooth zoom/pan family; ``area`` pins the coverage of both endpoints."""
    if T < 2:
        raise ValueError("T must be >= 2")
    sizes, corners = [], []
    for _ in range(2):
        hh, ww = sample_crop_size(H, W, rng, area)
        cx = rng.uniform(0.0, W - ww)
        cy = rng.uniform(0.0, H - hh)
        sizes.append((hh, ww))
        corners.append((cx, cy))
    return AffineSequence(T, H, W, sizes[0], sizes[1], corners[0], corners[1])


def apply_point(seq: AffineSequence, q, t: int) -> np.ndarray:
    if not 0 <= t < seq.T:
        raise IndexError(f"frame {t} out of range")
    return seq.apply(np.asarray(q, dtype=np.float64), t)


def invert_point(seq: AffineSequence, q, t: int) -> np.ndarray:
    if not 0 <= t < seq.T:
        raise IndexError(f"frame {t} out of range")
    return seq.invert(np.asarray(q, dtype=np.float64), t)


def _bilinear_clamped(frame: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    H, W = frame.shape[:2]
    x = np.clip(x, 0.0, W - 1)
    y = np.clip(y, 0.0, H - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), W - 2) if W > 1 else np.zeros_like(x, dtype=np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), H - 2) if H > 1 else np.zeros_like(y, dtype=np.int64)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    f00 = frame[y0, x0]
    f01 = frame[y0, x0 + 1]
    f10 = frame[y0 + 1, x0]
    f11 = frame[y0 + 1, x0 + 1]
    return (f00 * (1 - fx) + f01 * fx) * (1 - fy) + (f10 * (1 - fx) + f11 * fx) * fy


def resample_frame(frame: np.ndarray, seq: AffineSequence, t: int) -> np.ndarray:
    """Scale ``frame`` by ``Phi_t`` and place it on a black canvas of the same size."""
    H, W = frame.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    src = seq.invert(np.stack([xs, ys], axis=-1), t)
    sx, sy = src[..., 0], src[..., 1]
    # destination pixels whose preimage falls on the source pixel area
    covered = (sx >= -0.5) & (sx <= W - 0.5) & (sy >= -0.5) & (sy <= H - 0.5)
    out = np.zeros_like(frame)
    vals = _bilinear_clamped(frame, sx[covered], sy[covered])
    out[covered] = vals.astype(frame.dtype)
    return out


def resample_video(video: np.ndarray, seq: AffineSequence) -> np.ndarray:
    T, H, W = video.shape[:3]
    if (T, H, W) != (seq.T, seq.H, seq.W):
        raise ValueError(f"video {video.shape[:3]} does not match sequence {(seq.T, seq.H, seq.W)}")
    if seq.is_identity():
        return video.copy()
    return np.stack([resample_frame(video[t], seq, t) for t in range(T)])


# ---------------------------------------------------------------------------
# JPEG-style degradation

LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
CHROMA_TABLE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)


def quality_table(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling of a base quantisation table."""
    if not 1 <= quality <= 100:
        raise ValueError("quality must be in [1, 100]")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((base * scale + 50.0) / 100.0), 1.0, 255.0)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128.0, ycc[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def blockwise_quantize(channel: np.ndarray, table: np.ndarray) -> np.ndarray:
    """DCT each 8x8 block of a level-shifted channel, quantise, and invert."""
    H, W = channel.shape
    ph, pw = (-H) % 8, (-W) % 8
    x = np.pad(channel, ((0, ph), (0, pw)), mode="edge") - 128.0
    Hb, Wb = x.shape[0] // 8, x.shape[1] // 8
    blocks = x.reshape(Hb, 8, Wb, 8).transpose(0, 2, 1, 3)
    coef = dctn(blocks, axes=(2, 3), norm="ortho")
    coef = np.round(coef / table) * table
    rec = idctn(coef, axes=(2, 3), norm="ortho")
    rec = rec.transpose(0, 2, 1, 3).reshape(Hb * 8, Wb * 8) + 128.0
    return rec[:H, :W]


def jpeg_degrade(frame: np.ndarray, quality: int) -> np.ndarray:
    """Codec-like corruption: YCbCr, 8x8 DCT, IJG-scaled tables, inverse; output in [0, 1]."""
    ycc = rgb_to_ycbcr(np.asarray(frame, dtype=np.float64) * 255.0)
    luma = quality_table(LUMA_TABLE, quality)
    chroma = quality_table(CHROMA_TABLE, quality)
    out = np.stack(
        [
            blockwise_quantize(ycc[..., 0], luma),
            blockwise_quantize(ycc[..., 1], chroma),
            blockwise_quantize(ycc[..., 2], chroma),
        ],
        axis=-1,
    )
    rgb = np.clip(ycbcr_to_rgb(out) / 255.0, 0.0, 1.0)
    return rgb.astype(np.asarray(frame).dtype)


@dataclass
class DegradationConfig:
    use_jpeg: bool = True
    use_affine: bool = True
    jpeg_quality_range: tuple[int, int] = (20, 90)
    jpeg_per_frame: bool = False

    def validate(self) -> None:
        lo, hi = self.jpeg_quality_range
        if not 1 <= lo <= hi <= 100:
            raise ValueError("need 1 <= q_lo <= q_hi <= 100")


def degrade_video(video: np.ndarray, rng: np.random.Generator, cfg: DegradationConfig) -> np.ndarray:
    lo, hi = cfg.jpeg_quality_range
    if cfg.jpeg_per_frame:
        qs = rng.integers(lo, hi + 1, size=video.shape[0])
    else:
        qs = np.full(video.shape[0], rng.integers(lo, hi + 1))
    return np.stack([jpeg_degrade(f, int(q)) for f, q in zip(video, qs)])


def make_student_view(video: np.ndarray, q2, rng: np.random.Generator, cfg: DegradationConfig):
    """Degrade then warp the video; return the warped query (or queries) and the sequence used.

    ``q2`` is a ``QueryPoint`` or an ``N x 3`` array of ``(x, y, t)`` rows, and
    comes back in the same form. The input array is never modified; the
    teacher keeps the clean video.
    """
    cfg.validate()
    T, H, W = video.shape[:3]
    out = degrade_video(video, rng, cfg) if cfg.use_jpeg else video
    if cfg.use_affine:
        seq = sample_affine(T, H, W, rng)
        out = resample_video(out, seq)
    else:
        seq = AffineSequence.identity(T, H, W)
    if isinstance(q2, QueryPoint):
        x, y = seq.apply(np.array([q2.x, q2.y]), q2.t)
        return out, QueryPoint(float(x), float(y), q2.t), seq
    q = np.array(q2, dtype=np.float64)
    q[:, :2] = seq.apply(q[:, :2], q[:, 2].astype(np.int64))
    return out, q, seq
