"""Pseudo-ultrasound images from slice masks, and the CycleGAN objective terms."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .seeding import generator
from .views import BinaryMask, ViewDefinition, pixel_centers, write_pgm

DEFAULT_BLUR_SIGMA_PX = 2.0
DEFAULT_NOISE_SIGMA = 0.1


@dataclass(frozen=True, eq=False)
class GrayImage:
    intensities: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.intensities, dtype=np.float64)
        if a.ndim != 2:
            raise InvalidArgument("image must be 2-D")
        if not np.all((a >= 0) & (a <= 1)):
            raise InvalidArgument("intensities must lie in [0, 1]")
        a.setflags(write=False)
        object.__setattr__(self, "intensities", a)

    @property
    def height(self):
        return self.intensities.shape[0]

    @property
    def width(self):
        return self.intensities.shape[1]

    def quantized(self) -> np.ndarray:
        return np.round(self.intensities * 255).astype(np.uint8)


@dataclass(frozen=True)
class NoiseParams:
    blur_sigma: float = DEFAULT_BLUR_SIGMA_PX
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    seed: int = 0

    def __post_init__(self):
        if not (self.blur_sigma >= 0 and self.noise_sigma >= 0):
            raise InvalidArgument("blur_sigma and noise_sigma must be non-negative")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidArgument("seed must be an unsigned 64-bit integer")


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), replicated borders."""
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    r = k.size // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        n = out.shape[axis]
        for i, w in enumerate(k):
            acc += w * (padded[i:i + n, :] if axis == 0 else padded[:, i:i + n])
        out = acc
    return out


def sector_footprint(view: ViewDefinition, width: int, height: int, pixel_size: float) -> np.ndarray:
    """Pixels whose centres fall inside the view's fan (radius <= depth, angle <= half_angle)."""
    u, v = pixel_centers(width, height, pixel_size)
    radial = np.hypot(u, v)
    return (radial <= view.depth) & (u >= radial * math.cos(math.radians(view.half_angle)))


def degrade(intensity: np.ndarray, footprint: np.ndarray, params: NoiseParams) -> np.ndarray:
    """Blur, add seeded Gaussian noise and clamp inside ``footprint``; zero outside."""
    intensity = np.asarray(intensity, dtype=np.float64)
    blurred = gaussian_blur(intensity, params.blur_sigma)
    # the full-frame draw keeps the noise field independent of the footprint shape
    noise = generator(params.seed).standard_normal(intensity.shape) * params.noise_sigma
    return np.where(footprint, np.clip(blurred + noise, 0.0, 1.0), 0.0)


def pseudo_image(mask: BinaryMask, view: ViewDefinition, params: NoiseParams) -> GrayImage:
    """Sector-cropped, blurred and speckled rendering of a slice mask."""
    footprint = sector_footprint(view, mask.width, mask.height, mask.pixel_size)
    return GrayImage(degrade(mask.pixels / 255.0, footprint, params))


def save_gray(image: GrayImage, path) -> None:
    write_pgm(image.quantized(), path)


# -- adversarial objective --------------------------------------------------


def _open_unit(values, what) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise InvalidArgument(f"{what} must be non-empty")
    if not np.all((a > 0) & (a < 1)):
        raise InvalidArgument(f"{what} entries must lie strictly inside (0, 1)")
    return a


def gan_loss(d_real, d_fake) -> float:
    """E[log D(y)] + E[log(1 - D(G(x)))] with natural logarithms.

    Parameters
    ----------
    d_real : array_like
        Discriminator probabilities on real target-domain samples.
    d_fake : array_like
        Discriminator probabilities on translated samples.
    """
    real = _open_unit(d_real, "d_real")
    fake = _open_unit(d_fake, "d_fake")
    return float(np.mean(np.log(real)) + np.mean(np.log1p(-fake)))


def mean_abs_residual(residuals) -> float:
    a = np.asarray(residuals, dtype=np.float64)
    if a.size == 0:
        raise InvalidArgument("residual batch must be non-empty")
    return float(np.mean(np.abs(a)))


def cycle_loss(residuals_x, residuals_y) -> float:
    """Mean L1 cycle residual in X plus the same in Y.

    Each argument holds ``F(G(x)) - x`` (resp. ``G(F(y)) - y``) values; any
    shape is accepted and the sign is discarded.
    """
    return mean_abs_residual(residuals_x) + mean_abs_residual(residuals_y)


def full_objective(gan_xy: float, gan_yx: float, cycle: float, lam: float) -> float:
    if not lam >= 0:
        raise InvalidArgument("lambda must be non-negative")
    return gan_xy + gan_yx + lam * cycle


def loss_report(gan_xy, gan_yx, cycle, lam) -> dict:
    return {"gan_xy": gan_xy, "gan_yx": gan_yx, "cycle": cycle, "lambda": lam,
            "total": full_objective(gan_xy, gan_yx, cycle, lam)}


def write_loss_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2), encoding="utf-8")
