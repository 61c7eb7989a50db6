"""Scheduled supervision losses (forward evaluation only)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import Array, InvalidInputError, NormalMap

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DSSIM_WEIGHT = 0.2


@dataclass(frozen=True)
class LossSchedule:
    t_d: int = 7000
    t_n: int = 15000
    normal_start: int = 7000
    total_steps: int = 30000
    lambda_d: float = 0.2
    lambda_n: float = 0.1

    def __post_init__(self) -> None:
        if not 0 <= self.normal_start <= self.t_n <= self.total_steps:
            raise InvalidInputError("schedule needs 0 <= normal_start <= t_n <= total_steps")
        if not 0 <= self.t_d <= self.total_steps:
            raise InvalidInputError("schedule needs 0 <= t_d <= total_steps")
        if self.lambda_d < 0 or self.lambda_n < 0:
            raise InvalidInputError("loss weights must be non-negative")


@dataclass
class LossReport:
    depth_loss: float
    normal_loss: float
    color_loss: float
    total: float
    valid_pixel_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "depth_loss": self.depth_loss,
            "normal_loss": self.normal_loss,
            "color_loss": self.color_loss,
            "total": self.total,
            "valid_pixel_counts": dict(self.valid_pixel_counts),
        }


def _masked_mean(per_pixel: Array, mask: Array) -> tuple[float, int]:
    n = int(mask.sum())
    if n == 0:
        return 0.0, 0
    # math.fsum keeps the reduction independent of summation order
    return math.fsum(per_pixel[mask].tolist()) / n, n


def depth_loss_terms(d_hat: Array, d_raw: Array, d_filtered: Array, step: int,
                     sched: LossSchedule = LossSchedule()) -> tuple[float, int]:
    d_hat = np.asarray(d_hat, dtype=np.float64)
    target = np.asarray(d_raw if step < sched.t_d else d_filtered, dtype=np.float64)
    if d_hat.shape != target.shape:
        raise InvalidInputError(f"depth maps differ in size ({d_hat.shape} vs {target.shape})")
    return _masked_mean(np.abs(d_hat - target), target > 0)


def depth_loss(d_hat: Array, d_raw: Array, d_filtered: Array, step: int,
               sched: LossSchedule = LossSchedule()) -> float:
    """Mean L1 against raw depth before ``t_d`` and filtered depth from ``t_d`` on.

    Zero-valued target pixels are masked out of the mean.
    """
    return depth_loss_terms(d_hat, d_raw, d_filtered, step, sched)[0]


def normal_loss_terms(n_hat: NormalMap, n_p: NormalMap, n_f: NormalMap, step: int,
                      sched: LossSchedule = LossSchedule()) -> tuple[float, int]:
    if step < sched.normal_start:
        return 0.0, 0
    target = n_p if step < sched.t_n else n_f
    if n_hat.frame != target.frame:
        raise InvalidInputError("rendered and target normals must share a frame")
    if n_hat.shape != target.shape:
        raise InvalidInputError("normal maps differ in size")
    per_pixel = np.abs(n_hat.values - target.values).sum(axis=-1)
    return _masked_mean(per_pixel, target.valid)


def normal_loss(n_hat: NormalMap, n_p: NormalMap, n_f: NormalMap, step: int,
                sched: LossSchedule = LossSchedule()) -> float:
    """Mean per-pixel L1 norm against the prior, switching to the filtered prior at ``t_n``."""
    return normal_loss_terms(n_hat, n_p, n_f, step, sched)[0]


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Array:
    x = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(img: Array, g: Array) -> Array:
    # zero padding, same output size
    out = correlate1d(img, g, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, g, axis=1, mode="constant", cval=0.0)


def ssim_map(a: Array, b: Array) -> Array:
    """Per-pixel SSIM of two HxWxC images with an 11x11 Gaussian window."""
    g = gaussian_window()
    out = np.empty_like(a)
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mu_x, mu_y = _blur(x, g), _blur(y, g)
        sxx = _blur(x * x, g) - mu_x ** 2
        syy = _blur(y * y, g) - mu_y ** 2
        sxy = _blur(x * y, g) - mu_x * mu_y
        out[..., c] = ((2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)) / (
            (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sxx + syy + SSIM_C2))
    return out


def ssim(a: Array, b: Array) -> float:
    return float(np.mean(ssim_map(a, b)))


def color_loss(rendered: Array, reference: Array, weight: float = DSSIM_WEIGHT) -> float:
    """``(1 - weight) * L1 + weight * (1 - SSIM) / 2``."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3 or a.shape[2] != 3:
        raise InvalidInputError(f"color images must be matching HxWx3, got {a.shape} and {b.shape}")
    l1 = float(np.mean(np.abs(a - b)))
    return (1.0 - weight) * l1 + weight * (1.0 - ssim(a, b)) / 2.0


def total_loss(color: float, depth: float, normal: float,
               sched: LossSchedule = LossSchedule()) -> float:
    return color + sched.lambda_d * depth + sched.lambda_n * normal


def compute_losses(step: int, d_hat: Array, d_raw: Array, d_filtered: Array,
                   n_hat: NormalMap, n_p: NormalMap, n_f: NormalMap,
                   sched: LossSchedule = LossSchedule(),
                   rendered_rgb: Array | None = None, reference_rgb: Array | None = None) -> LossReport:
    ld, nd = depth_loss_terms(d_hat, d_raw, d_filtered, step, sched)
    ln, nn = normal_loss_terms(n_hat, n_p, n_f, step, sched)
    if rendered_rgb is not None and reference_rgb is not None:
        lc = color_loss(rendered_rgb, reference_rgb)
        nc = int(np.prod(np.shape(reference_rgb)[:2]))
    else:
        lc, nc = 0.0, 0
    return LossReport(ld, ln, lc, total_loss(lc, ld, ln, sched),
                      {"depth": nd, "normal": nn, "color": nc})
