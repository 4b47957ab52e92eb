"""Synthetic degradations for the seven restoration tasks.

Images are float arrays of shape ``(H, W, 3)`` with values in ``[0, 1]``.
Every operation is a pure function of its inputs and, where randomness is
involved, of an explicit :class:`numpy.random.Generator`.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from mioir.tasks import TASKS, TaskId

GROUPS = ("in_dis", "out_dis")
MIN_SIDE = 8


# ---------------------------------------------------------------------------
# random streams


def stream_key(*parts) -> list[int]:
    """Stable 32-bit words identifying a random stream.

    Built from a hash of the string form of ``parts`` so the stream does not
    depend on Python's per-process hash salt.
    """
    digest = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=16).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Generator for ``(seed, stream...)``; identical inputs give identical draws."""
    entropy = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF, *stream_key(*stream)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------------------
# parameter records


@dataclass
class DegradeParams:
    task: TaskId
    sr_scale: int | None = None
    blur_size: int | None = None
    blur_sigma: float | None = None
    noise_sigma: float | None = None
    jpeg_quality: int | None = None
    rain_strength: float | None = None
    haze_A: float | None = None
    haze_beta: float | None = None
    ll_gamma: float | None = None

    def to_dict(self) -> dict:
        d = {"task": self.task.value}
        for f in TASK_FIELDS[self.task]:
            d[f] = getattr(self, f)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DegradeParams":
        kw = {k: v for k, v in d.items() if k != "task"}
        return cls(task=TaskId(d["task"]), **kw)


TASK_FIELDS: dict[TaskId, tuple[str, ...]] = {
    TaskId.S: ("sr_scale",),
    TaskId.B: ("blur_size", "blur_sigma"),
    TaskId.N: ("noise_sigma",),
    TaskId.J: ("jpeg_quality",),
    TaskId.R: ("rain_strength",),
    TaskId.H: ("haze_A", "haze_beta"),
    TaskId.L: ("ll_gamma",),
}
_INT_FIELDS = {"sr_scale", "blur_size", "jpeg_quality"}


def _default_ranges() -> dict[str, dict[str, tuple[float, float]]]:
    return {
        "sr_scale": {"in_dis": (4, 4), "out_dis": (8, 8)},
        "blur_size": {"in_dis": (7, 23), "out_dis": (7, 23)},
        "blur_sigma": {"in_dis": (1.0, 3.0), "out_dis": (3.0, 5.0)},
        "noise_sigma": {"in_dis": (15.0, 50.0), "out_dis": (50.0, 70.0)},
        "jpeg_quality": {"in_dis": (30, 70), "out_dis": (10, 30)},
        "rain_strength": {"in_dis": (50.0, 100.0), "out_dis": (100.0, 150.0)},
        "haze_A": {"in_dis": (0.8, 1.0), "out_dis": (0.8, 1.0)},
        "haze_beta": {"in_dis": (0.5, 2.5), "out_dis": (2.5, 3.0)},
        "ll_gamma": {"in_dis": (1.0, 3.0), "out_dis": (3.0, 4.0)},
    }


@dataclass
class ParamRanges:
    """Closed sampling intervals per parameter and test group."""

    table: dict[str, dict[str, tuple[float, float]]] = field(default_factory=_default_ranges)

    def __post_init__(self):
        for name, groups in self.table.items():
            for group, (lo, hi) in groups.items():
                if lo > hi:
                    raise ValueError(f"range {name}/{group}: lower {lo} > upper {hi}")

    def get(self, name: str, group: str) -> tuple[float, float]:
        return self.table[name][group]

    def override(self, name: str, group: str, lo: float, hi: float) -> "ParamRanges":
        table = {k: dict(v) for k, v in self.table.items()}
        table.setdefault(name, {})[group] = (lo, hi)
        return ParamRanges(table)

    def to_dict(self) -> dict:
        return {k: {g: list(v) for g, v in groups.items()} for k, groups in self.table.items()}


@dataclass
class RainConfig:
    density_per_strength: float = 1 / 2000
    length_per_strength: float = 1 / 5
    max_angle_deg: float = 30.0
    brightness: tuple[float, float] = (0.5, 1.0)
    soften_sigma: float = 0.5


def load_degrade_config(path) -> tuple[ParamRanges, RainConfig]:
    """Read ``[ranges.in_dis]``, ``[ranges.out_dis]`` and ``[rain]`` sections.

    Range values are written ``lo, hi``. Missing keys keep their defaults.
    """
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise OSError(f"cannot read degradation config {path}")
    ranges = ParamRanges()
    for group in GROUPS:
        sec = f"ranges.{group}"
        if not cp.has_section(sec):
            continue
        for key, raw in cp.items(sec):
            if key not in ranges.table:
                raise ValueError(f"[{sec}] unknown parameter {key!r}")
            lo, hi = (float(v) for v in raw.split(","))
            ranges = ranges.override(key, group, lo, hi)
    rain = RainConfig()
    if cp.has_section("rain"):
        s = cp["rain"]
        kw = {}
        for f in ("density_per_strength", "length_per_strength", "max_angle_deg", "soften_sigma"):
            if f in s:
                kw[f] = s.getfloat(f)
        if "brightness" in s:
            kw["brightness"] = tuple(float(v) for v in s["brightness"].split(","))
        rain = dataclasses.replace(rain, **kw)
    return ranges, rain


# ---------------------------------------------------------------------------
# helpers


def check_image(y: np.ndarray, name: str = "image") -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3 or y.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {y.shape}")
    if y.shape[0] < MIN_SIDE or y.shape[1] < MIN_SIDE:
        raise ValueError(f"{name} must be at least {MIN_SIDE}x{MIN_SIDE}, got {y.shape[:2]}")
    return y


def _clip(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def filter2d(y: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2-D convolution with edge-replicate padding, no clipping."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    yp = np.pad(y, ((ph, ph), (pw, pw), (0, 0)), mode="edge")
    h, w = y.shape[:2]
    out = np.zeros_like(y)
    flipped = kernel[::-1, ::-1]
    for i in range(kh):
        for j in range(kw):
            wgt = flipped[i, j]
            if wgt != 0.0:
                out += wgt * yp[i : i + h, j : j + w]
    return out


# ---------------------------------------------------------------------------
# blur


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if int(size) != size or size % 2 == 0 or not 3 <= size <= 31:
        raise ValueError(f"kernel size must be odd and within [3, 31], got {size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = np.arange(size, dtype=np.float64) - size // 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def op_blur(y: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    y = check_image(y)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape[0] > y.shape[0] or kernel.shape[1] > y.shape[1]:
        raise ValueError(f"kernel {kernel.shape} larger than image {y.shape[:2]}")
    if abs(kernel.sum() - 1.0) > 1e-9:
        raise ValueError("blur kernel must be normalized")
    return _clip(filter2d(y, kernel))


# ---------------------------------------------------------------------------
# bicubic resampling


def cubic(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(n_in: int, n_out: int, a: float = -0.5, antialias: bool = False) -> np.ndarray:
    """Dense ``(n_out, n_in)`` resampling matrix along one axis.

    Pixel centres are aligned (half-pixel convention) and out-of-range taps
    are clamped to the border pixel. When shrinking with ``antialias`` the
    kernel is stretched by the inverse scale, as MATLAB's ``imresize`` does.
    """
    scale = n_out / n_in
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    support = 2.0 * stretch
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) / scale - 0.5
        lo = int(math.floor(center - support)) + 1
        hi = int(math.floor(center + support))
        taps = np.arange(lo, hi + 1)
        wt = cubic((center - taps) / stretch, a)
        wt = wt / wt.sum()
        np.add.at(w[i], np.clip(taps, 0, n_in - 1), wt)
    return w


def bicubic_resize(y: np.ndarray, out_h: int, out_w: int, antialias: bool = False) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = y.shape[:2]
    wh = resize_weights(h, out_h, antialias=antialias)
    ww = resize_weights(w, out_w, antialias=antialias)
    out = np.einsum("ih,hwc->iwc", wh, y)
    out = np.einsum("jw,iwc->ijc", ww, out)
    return _clip(out)


def op_sr(y: np.ndarray, scale: int) -> np.ndarray:
    y = check_image(y)
    if scale not in (1, 2, 4, 8):
        raise ValueError(f"scale must be one of 1, 2, 4, 8, got {scale}")
    h, w = y.shape[:2]
    if h < scale or w < scale:
        raise ValueError(f"image {h}x{w} smaller than scale {scale}")
    if scale == 1:
        return y.copy()
    small = bicubic_resize(y, h // scale, w // scale)
    return bicubic_resize(small, h, w)


# ---------------------------------------------------------------------------
# noise, JPEG, rain


def op_noise(y: np.ndarray, sigma255: float, rng: np.random.Generator) -> np.ndarray:
    y = check_image(y)
    if sigma255 < 0:
        raise ValueError(f"noise sigma must be non-negative, got {sigma255}")
    if sigma255 == 0:
        return y.copy()
    return _clip(y + rng.standard_normal(y.shape) * (sigma255 / 255.0))


def to_uint8(y: np.ndarray) -> np.ndarray:
    """Quantize ``[0, 1]`` floats to bytes with round-half-up."""
    return np.floor(np.clip(y, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def jpeg_bytes(y: np.ndarray, quality: int) -> bytes:
    if int(quality) != quality or not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be an integer in [1, 100], got {quality}")
    buf = io.BytesIO()
    Image.fromarray(to_uint8(y), "RGB").save(buf, format="JPEG", quality=int(quality), subsampling=2, optimize=False)
    return buf.getvalue()


def op_jpeg(y: np.ndarray, quality: int) -> np.ndarray:
    y = check_image(y)
    data = jpeg_bytes(y, quality)
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def rain_streaks(h: int, w: int, strength: float, rng: np.random.Generator, cfg: RainConfig | None = None):
    """Additive streak map ``(h, w)`` and the number of streaks drawn.

    Seed pixels are Bernoulli with density ``strength * density_per_strength``;
    all streaks of one image share a direction, each has its own brightness.
    """
    cfg = cfg or RainConfig()
    density = min(1.0, strength * cfg.density_per_strength)
    length = int(round(strength * cfg.length_per_strength))
    angle = math.radians(rng.uniform(-cfg.max_angle_deg, cfg.max_angle_deg))
    seeds = rng.random((h, w)) < density
    rows, cols = np.nonzero(seeds)
    n = rows.size
    bright = rng.uniform(cfg.brightness[0], cfg.brightness[1], size=n)
    streaks = np.zeros((h, w))
    if n == 0 or length < 1:
        return streaks, n
    t = np.arange(length)
    rr = np.rint(rows[:, None] + t[None, :] * math.cos(angle)).astype(int)
    cc = np.rint(cols[:, None] + t[None, :] * math.sin(angle)).astype(int)
    bb = np.broadcast_to(bright[:, None], rr.shape)
    keep = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    np.maximum.at(streaks, (rr[keep], cc[keep]), bb[keep])
    if cfg.soften_sigma > 0:
        streaks = filter2d(streaks[:, :, None], gaussian_kernel(3, cfg.soften_sigma))[:, :, 0]
    return streaks, n


def op_rain(y: np.ndarray, strength: float, rng: np.random.Generator, cfg: RainConfig | None = None) -> np.ndarray:
    y = check_image(y)
    if strength < 0:
        raise ValueError(f"rain strength must be non-negative, got {strength}")
    if strength == 0:
        return y.copy()
    streaks, _ = rain_streaks(y.shape[0], y.shape[1], strength, rng, cfg)
    return _clip(y + streaks[:, :, None])


# ---------------------------------------------------------------------------
# haze and low light

DEPTH_KINDS = ("smooth-random", "vertical-ramp")


def synth_depth(h: int, w: int, rng: np.random.Generator | None = None, kind: str = "smooth-random") -> np.ndarray:
    if kind == "vertical-ramp":
        if h < 2 or w < 1:
            raise ValueError(f"depth map too small: {h}x{w}")
        return np.repeat((np.arange(h) / (h - 1))[:, None], w, axis=1)
    if kind != "smooth-random":
        raise ValueError(f"unknown depth kind {kind!r}; choose from {DEPTH_KINDS}")
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"depth map too small: {h}x{w}")
    if rng is None:
        raise ValueError("smooth-random depth needs an rng")
    grid = rng.random((4, 4))
    # bilinear, grid corners pinned to image corners
    ri = np.linspace(0, 3, h)
    ci = np.linspace(0, 3, w)
    r0 = np.minimum(ri.astype(int), 2)
    c0 = np.minimum(ci.astype(int), 2)
    fr = (ri - r0)[:, None]
    fc = (ci - c0)[None, :]
    g00 = grid[r0][:, c0]
    g01 = grid[r0][:, c0 + 1]
    g10 = grid[r0 + 1][:, c0]
    g11 = grid[r0 + 1][:, c0 + 1]
    d = (1 - fr) * ((1 - fc) * g00 + fc * g01) + fr * ((1 - fc) * g10 + fc * g11)
    span = d.max() - d.min()
    return (d - d.min()) / span if span > 0 else np.zeros_like(d)


def op_haze(y: np.ndarray, A: float, beta: float, depth: np.ndarray) -> np.ndarray:
    y = check_image(y)
    if not 0 <= A <= 1:
        raise ValueError(f"atmospheric light must lie in [0, 1], got {A}")
    if beta < 0:
        raise ValueError(f"scattering coefficient must be non-negative, got {beta}")
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != y.shape[:2]:
        raise ValueError(f"depth {depth.shape} does not match image {y.shape[:2]}")
    t = np.exp(-beta * depth)[:, :, None]
    return _clip(y * t + A * (1.0 - t))


def op_lowlight(y: np.ndarray, gamma: float) -> np.ndarray:
    y = check_image(y)
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    return _clip(np.power(y, gamma))


# ---------------------------------------------------------------------------
# sampling and dispatch


def sample_params(task: TaskId, group: str, ranges: ParamRanges | None, rng: np.random.Generator) -> DegradeParams:
    task = TaskId(task)
    if group not in GROUPS:
        raise ValueError(f"group must be one of {GROUPS}, got {group!r}")
    ranges = ranges or ParamRanges()
    p = DegradeParams(task=task)
    for name in TASK_FIELDS[task]:
        lo, hi = ranges.get(name, group)
        if name == "sr_scale":
            val = int(lo) if lo == hi else int(rng.choice([s for s in (2, 4, 8) if lo <= s <= hi]))
        elif name == "blur_size":
            odd = np.arange(int(math.ceil(lo)) | 1, int(hi) + 1, 2)
            val = int(rng.choice(odd))
        elif name in _INT_FIELDS:
            val = int(rng.integers(int(lo), int(hi), endpoint=True))
        else:
            val = float(rng.uniform(lo, hi)) if lo < hi else float(lo)
        setattr(p, name, val)
    return p


def apply_params(
    y: np.ndarray,
    params: DegradeParams,
    rng: np.random.Generator | None = None,
    depth_kind: str = "smooth-random",
    rain: RainConfig | None = None,
) -> np.ndarray:
    """Apply a fully specified degradation."""
    t = params.task
    if t is TaskId.S:
        return op_sr(y, params.sr_scale)
    if t is TaskId.B:
        return op_blur(y, gaussian_kernel(params.blur_size, params.blur_sigma))
    if t is TaskId.N:
        return op_noise(y, params.noise_sigma, rng)
    if t is TaskId.J:
        return op_jpeg(y, params.jpeg_quality)
    if t is TaskId.R:
        return op_rain(y, params.rain_strength, rng, rain)
    if t is TaskId.H:
        y = check_image(y)
        depth = synth_depth(y.shape[0], y.shape[1], rng, depth_kind)
        return op_haze(y, params.haze_A, params.haze_beta, depth)
    if t is TaskId.L:
        return op_lowlight(y, params.ll_gamma)
    raise ValueError(f"unknown task {t!r}")


def degrade(
    y: np.ndarray,
    task: TaskId,
    group: str = "in_dis",
    ranges: ParamRanges | None = None,
    rng: np.random.Generator | None = None,
    *,
    depth_kind: str = "smooth-random",
    rain: RainConfig | None = None,
    **forced,
) -> tuple[np.ndarray, DegradeParams]:
    """Degrade ``y`` for ``task`` with parameters sampled for ``group``.

    Keyword arguments named after :class:`DegradeParams` fields pin those
    values instead of sampling them, e.g. ``degrade(y, "L", ll_gamma=1)``.
    Parameters are drawn first, then any randomness the operation needs.
    """
    task = TaskId(task)
    if rng is None:
        rng = make_rng(0, "degrade", task.value, group)
    params = sample_params(task, group, ranges, rng)
    for k, v in forced.items():
        if k not in TASK_FIELDS[task]:
            raise ValueError(f"parameter {k!r} does not apply to task {task.value}")
        setattr(params, k, v)
    x = apply_params(y, params, rng, depth_kind=depth_kind, rain=rain)
    return x, params


__all__ = [
    "DEPTH_KINDS",
    "GROUPS",
    "TASKS",
    "DegradeParams",
    "ParamRanges",
    "RainConfig",
    "apply_params",
    "bicubic_resize",
    "cubic",
    "degrade",
    "gaussian_kernel",
    "jpeg_bytes",
    "load_degrade_config",
    "make_rng",
    "op_blur",
    "op_haze",
    "op_jpeg",
    "op_lowlight",
    "op_noise",
    "op_rain",
    "op_sr",
    "rain_streaks",
    "resize_weights",
    "sample_params",
    "synth_depth",
    "to_uint8",
]
