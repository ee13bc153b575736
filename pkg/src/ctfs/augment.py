"""Weak (per-teacher) and strong (student) perturbations for sonar intensity images.

All operators work on 2-D float arrays in [0, 1] with rows = y and columns = x.
Shadow and attenuation are intensity-only; the general weak pipeline is the only
one that moves pixels, and it returns a :class:`GeometryRecord` so the same
transform can be replayed on masks or reliability maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np

TWO_PI = 2.0 * math.pi

KINDS = ("general_weak", "sonar_shadow_weak", "sonar_attenuation_weak", "strong")
TEACHER_KIND = {
    "general": "general_weak",
    "sonar_a": "sonar_shadow_weak",
    "sonar_b": "sonar_attenuation_weak",
}


@dataclass(frozen=True)
class AugmentConfig:
    # shadow (alpha, sector span in degrees)
    alpha_range: tuple[float, float] = (0.3, 0.7)
    span_deg_range: tuple[float, float] = (15.0, 60.0)
    # energy attenuation
    gamma_range: tuple[float, float] = (0.2, 0.5)
    # general geometric
    scale_range: tuple[float, float] = (1.0, 1.5)
    flip_prob: float = 0.5
    # strong photometric
    brightness: float = 0.2
    contrast: float = 0.4
    jitter_prob: float = 0.8
    gray_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    # stability views for the general teacher (mild photometric jitter)
    view_brightness: float = 0.1
    view_contrast: float = 0.2
    # stack the general geometric ops beneath the sonar specialty operators
    sonar_geometric: bool = True


# ------------------------------------------------------------------ shadow


@dataclass(frozen=True)
class ShadowParams:
    origin: tuple[float, float]  # (x0, y0)
    theta: float
    delta_theta: float
    alpha: float
    radius: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 < self.delta_theta <= TWO_PI:
            raise ValueError(f"delta_theta must be in (0, 2pi], got {self.delta_theta}")
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @staticmethod
    def default_radius(height: int, width: int) -> float:
        return 0.2 * min(height, width)

    @classmethod
    def with_default_radius(cls, height, width, origin, theta, delta_theta, alpha):
        return cls(origin, theta, delta_theta, alpha, cls.default_radius(height, width))

    @classmethod
    def sample(cls, rng: np.random.Generator, height: int, width: int,
               cfg: AugmentConfig = AugmentConfig()) -> "ShadowParams":
        x0 = int(rng.integers(width))
        y0 = int(rng.integers(height))
        theta = rng.uniform(0.0, TWO_PI)
        span = math.radians(rng.uniform(*cfg.span_deg_range))
        alpha = rng.uniform(*cfg.alpha_range)
        return cls.with_default_radius(height, width, (x0, y0), theta, span, alpha)


def _polar(params: ShadowParams, height: int, width: int):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    x0, y0 = params.origin
    dx, dy = xx - x0, yy - y0
    return np.arctan2(dy, dx), np.sqrt(dx * dx + dy * dy)


def shadow_region(params: ShadowParams, height: int, width: int) -> np.ndarray:
    """Pixels inside the shadow sector, as an H x W boolean mask.

    Angular membership is tested on the wrapped offset (phi - theta) mod 2pi so a
    sector crossing the -pi/pi seam stays contiguous.
    """
    x0, y0 = params.origin
    if not (0 <= x0 < width and 0 <= y0 < height):
        raise ValueError(f"shadow origin {params.origin} outside a {height}x{width} image")
    phi, d = _polar(params, height, width)
    offset = np.mod(phi - params.theta, TWO_PI)
    return (offset <= params.delta_theta) & (d <= params.radius)


def apply_shadow(img: np.ndarray, params: ShadowParams) -> np.ndarray:
    h, w = img.shape
    region = shadow_region(params, h, w)
    _, d = _polar(params, h, w)
    factor = 1.0 - params.alpha * (1.0 - d / params.radius)
    return np.where(region, np.clip(img * factor, 0.0, 1.0), img)


# ------------------------------------------------------------- attenuation


@dataclass(frozen=True)
class AttenuationParams:
    gamma: float

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")

    @classmethod
    def sample(cls, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
        return cls(rng.uniform(*cfg.gamma_range))


def apply_attenuation(img: np.ndarray, params: AttenuationParams) -> np.ndarray:
    h = img.shape[0]
    scale = 1.0 - params.gamma * np.arange(h, dtype=np.float64) / h
    return np.clip(img * scale[:, None], 0.0, 1.0)


# ----------------------------------------------------------------- geometry


@dataclass(frozen=True)
class GeometryRecord:
    """Resize to ``resized`` (rows, cols), crop ``size`` at ``offset``, optional h-flip."""

    resized: tuple[int, int]
    offset: tuple[int, int]
    size: tuple[int, int]
    flip: bool

    @classmethod
    def identity(cls, height: int, width: int) -> "GeometryRecord":
        return cls((height, width), (0, 0), (height, width), False)

    @classmethod
    def sample(cls, rng: np.random.Generator, height: int, width: int,
               cfg: AugmentConfig = AugmentConfig()) -> "GeometryRecord":
        s = rng.uniform(*cfg.scale_range)
        rh, rw = max(height, int(round(height * s))), max(width, int(round(width * s)))
        top = int(rng.integers(rh - height + 1))
        left = int(rng.integers(rw - width + 1))
        flip = bool(rng.random() < cfg.flip_prob)
        return cls((rh, rw), (top, left), (height, width), flip)

    def apply(self, arr: np.ndarray, nearest: bool = False) -> np.ndarray:
        rh, rw = self.resized
        ch, cw = self.size
        top, left = self.offset
        if ch > rh or cw > rw or top + ch > rh or left + cw > rw or top < 0 or left < 0:
            raise ValueError(f"crop {self.size} at {self.offset} does not fit resized {self.resized}")
        out = arr
        if out.shape != (rh, rw):
            interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
            out = cv2.resize(out, (rw, rh), interpolation=interp)
        out = out[top:top + ch, left:left + cw]
        if self.flip:
            out = out[:, ::-1]
        return np.ascontiguousarray(out)


def apply_general_weak(img, mask=None, seed=None, cfg: AugmentConfig = AugmentConfig(), rng=None):
    """Random resize, random crop back to the input size, horizontal flip.

    Returns ``(img', mask', record)``; ``mask'`` is None when no mask is given.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    if mask is not None and mask.shape != img.shape:
        raise ValueError("image and mask are not aligned")
    rec = GeometryRecord.sample(rng, *img.shape, cfg)
    out = rec.apply(img)
    out_mask = rec.apply(mask, nearest=True) if mask is not None else None
    return out, out_mask, rec


# ------------------------------------------------------------------- strong


@dataclass(frozen=True)
class StrongParams:
    brightness: float = 0.0
    contrast: float = 1.0
    grayscale: bool = False
    blur_ksize: int = 1
    blur_sigma: float = 0.0

    @classmethod
    def sample(cls, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
        b, c = 0.0, 1.0
        if rng.random() < cfg.jitter_prob:
            b = rng.uniform(-cfg.brightness, cfg.brightness)
            c = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast)
        gray = bool(rng.random() < cfg.gray_prob)
        k, sigma = 1, 0.0
        if rng.random() < cfg.blur_prob:
            sigma = rng.uniform(*cfg.blur_sigma)
            k = 2 * int(math.ceil(2.0 * sigma)) + 1
        return cls(b, c, gray, k, sigma)


def photometric(img: np.ndarray, p: StrongParams) -> np.ndarray:
    out = img
    if p.contrast != 1.0 or p.brightness != 0.0:
        mean = float(img.mean())
        out = np.clip((out - mean) * p.contrast + mean + p.brightness, 0.0, 1.0)
    # grayscale conversion is a no-op on single-channel sonar
    if p.blur_ksize > 1:
        out = cv2.GaussianBlur(out, (p.blur_ksize, p.blur_ksize), p.blur_sigma,
                               borderType=cv2.BORDER_REFLECT)
        out = np.clip(out, 0.0, 1.0)
    return out


def apply_strong(img, seed=None, cfg: AugmentConfig = AugmentConfig(), rng=None, params=None):
    """Photometric-only student perturbation; the pixel grid never moves."""
    if params is None:
        rng = rng if rng is not None else np.random.default_rng(seed)
        params = StrongParams.sample(rng, cfg)
    return photometric(img, params)


# ----------------------------------------------------------------- pipelines


@dataclass
class AugmentationPipeline:
    """Weak pipeline bound to one teacher family (or the strong student pipeline)."""

    kind: str
    cfg: AugmentConfig = field(default_factory=AugmentConfig)
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown pipeline kind {self.kind!r}")
        self._rng = np.random.default_rng(self.rng_seed)

    @property
    def ops(self) -> list[str]:
        geo = ["resize", "crop", "hflip"]
        if self.kind == "general_weak":
            return geo
        if self.kind == "strong":
            return ["color_jitter", "grayscale", "gaussian_blur"]
        special = ["acoustic_shadow"] if self.kind == "sonar_shadow_weak" else ["energy_attenuation"]
        return (geo if self.cfg.sonar_geometric else []) + special

    def __call__(self, img, mask=None, rng=None):
        """Apply the pipeline; returns ``(img', mask', record)``."""
        rng = rng if rng is not None else self._rng
        if self.kind == "strong":
            return apply_strong(img, cfg=self.cfg, rng=rng), mask, GeometryRecord.identity(*img.shape)
        return weak_view(self.kind, img, mask, rng, self.cfg)


def weak_view(kind: str, img, mask, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    if kind == "general_weak" or cfg.sonar_geometric:
        img, mask, rec = apply_general_weak(img, mask, cfg=cfg, rng=rng)
    else:
        rec = GeometryRecord.identity(*img.shape)
    if kind == "sonar_shadow_weak":
        img = apply_shadow(img, ShadowParams.sample(rng, *img.shape, cfg))
    elif kind == "sonar_attenuation_weak":
        img = apply_attenuation(img, AttenuationParams.sample(rng, cfg))
    elif kind != "general_weak":
        raise ValueError(f"{kind!r} is not a weak pipeline")
    return img, mask, rec


def stability_view(kind: str, img, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    """Geometry-preserving perturbation from a teacher family, for reliability views."""
    if kind == "sonar_shadow_weak":
        return apply_shadow(img, ShadowParams.sample(rng, *img.shape, cfg))
    if kind == "sonar_attenuation_weak":
        return apply_attenuation(img, AttenuationParams.sample(rng, cfg))
    if kind == "general_weak":
        b = rng.uniform(-cfg.view_brightness, cfg.view_brightness)
        c = rng.uniform(1.0 - cfg.view_contrast, 1.0 + cfg.view_contrast)
        return photometric(img, StrongParams(brightness=b, contrast=c))
    raise ValueError(f"{kind!r} has no stability views")
