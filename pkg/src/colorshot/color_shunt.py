"""Color-space conversion and channel separation.

An input RGB image is first converted into a three-channel target space
(CIELAB by default) and then split into three single-channel planes: the
first plane is the core channel (L for CIELAB), the remaining two are
auxiliary (a, b).  All conversion math runs in double precision; callers
downcast at the tensor boundary.

Reference definitions:

* CIELAB uses the sRGB transfer function (IEC 61966-2-1) and the D65 white
  point, with the white point taken as the row sums of the sRGB-to-XYZ
  matrix so that RGB(255,255,255) maps to exactly (L=100, a=0, b=0).
* YUV uses the BT.601 luma weights.
* HSV and HSL follow the usual hexcone formulas with hue normalized to
  [0, 1).
* The RGB tag simply rescales 8-bit values to [0, 1].

Each plane produced by :func:`shunt` is standardized with fixed affine
constants (subtract a per-channel mean, divide by a per-channel scale).
The constants live in :data:`CHANNEL_NORMALIZATION` so that experiments
are reproducible and the normalization can be undone exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError, ShapeError


class ColorSpace(Enum):
    """Supported three-channel target spaces."""

    CIELAB = "cielab"
    RGB = "rgb"
    HSV = "hsv"
    YUV = "yuv"
    HSL = "hsl"

    @classmethod
    def parse(cls, name: str) -> "ColorSpace":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ConfigurationError(
                f"unknown color space {name!r}; expected one of: {valid}"
            ) from None


DEFAULT_SPACE = ColorSpace.CIELAB

# sRGB to XYZ (linear light, D65, 2-degree observer).
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ],
    dtype=np.float64,
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)

# White point = image of (1, 1, 1), so white maps to L=100, a=b=0 exactly.
_XYZ_WHITE = _RGB_TO_XYZ.sum(axis=1)

# CIE f(t) breakpoints as exact rationals.
_LAB_EPS = (6.0 / 29.0) ** 3
_LAB_KAPPA = (29.0 / 3.0) ** 3  # slope of the linear segment times 116

# BT.601 luma weights and chroma scales.
_YUV_WR, _YUV_WG, _YUV_WB = 0.299, 0.587, 0.114
_YUV_UMAX, _YUV_VMAX = 0.436, 0.615

# Per-channel affine normalization (mean, scale) applied by `shunt`.
# Chosen so typical values land near [-1, 1]; recorded here, not derived
# from any dataset.
CHANNEL_NORMALIZATION: dict[ColorSpace, tuple[tuple[float, float, float], tuple[float, float, float]]] = {
    ColorSpace.CIELAB: ((50.0, 0.0, 0.0), (50.0, 110.0, 110.0)),
    ColorSpace.RGB: ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
    ColorSpace.HSV: ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
    ColorSpace.YUV: ((0.5, 0.0, 0.0), (0.5, _YUV_UMAX, _YUV_VMAX)),
    ColorSpace.HSL: ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
}


@dataclass(frozen=True)
class ChannelGroup:
    """The three single-channel planes produced by the shunt.

    ``x1`` is the core channel; ``x2`` and ``x3`` are auxiliary.  All three
    share one shape (any leading batch dimensions followed by H, W).
    """

    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    core_index: int = 0

    def __post_init__(self):
        if not (self.x1.shape == self.x2.shape == self.x3.shape):
            raise ShapeError(
                f"channel planes disagree in shape: {self.x1.shape}, "
                f"{self.x2.shape}, {self.x3.shape}"
            )
        for name, plane in (("x1", self.x1), ("x2", self.x2), ("x3", self.x3)):
            if not np.all(np.isfinite(plane)):
                raise ShapeError(f"channel plane {name} contains non-finite values")

    @property
    def planes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.x1, self.x2, self.x3


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _LAB_EPS, np.cbrt(t), (_LAB_KAPPA * t + 16.0) / 116.0)


def _lab_f_inv(ft: np.ndarray) -> np.ndarray:
    return np.where(ft > 6.0 / 29.0, ft**3, (116.0 * ft - 16.0) / _LAB_KAPPA)


def _rgb01_to_lab(rgb: np.ndarray) -> np.ndarray:
    xyz = _srgb_to_linear(rgb) @ _RGB_TO_XYZ.T
    f = _lab_f(xyz / _XYZ_WHITE)
    lightness = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([lightness, a, b], axis=-1)


def _lab_to_rgb01(lab: np.ndarray) -> np.ndarray:
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)], axis=-1)
    xyz = xyz * _XYZ_WHITE
    return _linear_to_srgb(xyz @ _XYZ_TO_RGB.T)


def _rgb01_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    spread = maxc - minc
    safe = np.where(spread == 0.0, 1.0, spread)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(spread == 0.0, 0.0, (h / 6.0) % 1.0)
    s = np.where(maxc == 0.0, 0.0, spread / np.where(maxc == 0.0, 1.0, maxc))
    return np.stack([h, s, maxc], axis=-1)


def _rgb01_to_hsl(rgb: np.ndarray) -> np.ndarray:
    h = _rgb01_to_hsv(rgb)[..., 0]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    lightness = (maxc + minc) / 2.0
    spread = maxc - minc
    denom = 1.0 - np.abs(2.0 * lightness - 1.0)
    s = np.where(spread == 0.0, 0.0, spread / np.where(denom == 0.0, 1.0, denom))
    return np.stack([h, s, lightness], axis=-1)


def _rgb01_to_yuv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = _YUV_WR * r + _YUV_WG * g + _YUV_WB * b
    u = _YUV_UMAX * (b - y) / (1.0 - _YUV_WB)
    v = _YUV_VMAX * (r - y) / (1.0 - _YUV_WR)
    return np.stack([y, u, v], axis=-1)


_CONVERTERS = {
    ColorSpace.CIELAB: _rgb01_to_lab,
    ColorSpace.RGB: lambda rgb: rgb,
    ColorSpace.HSV: _rgb01_to_hsv,
    ColorSpace.YUV: _rgb01_to_yuv,
    ColorSpace.HSL: _rgb01_to_hsl,
}


def convert(image: np.ndarray, space: ColorSpace = DEFAULT_SPACE) -> np.ndarray:
    """Convert an 8-bit RGB image to the target space in double precision.

    ``image`` is an array of shape (..., H, W, 3) with values in [0, 255];
    any leading batch dimensions are carried through.  The result has the
    same shape with dtype float64.
    """
    if not isinstance(space, ColorSpace):
        raise ConfigurationError(f"unknown color space tag: {space!r}")
    image = np.asarray(image)
    if image.ndim < 3 or image.shape[-1] != 3:
        raise ShapeError(
            f"expected an array of RGB triples with trailing dimension 3, got shape {image.shape}"
        )
    rgb = image.astype(np.float64) / 255.0
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        raise ShapeError("RGB values must lie in [0, 255]")
    return _CONVERTERS[space](rgb)


def invert(converted: np.ndarray, space: ColorSpace = DEFAULT_SPACE) -> np.ndarray:
    """Map a converted image back to 8-bit RGB (used for round-trip checks).

    Only CIELAB and RGB have inverses here; the round-trip contract is
    stated for the default CIELAB path.
    """
    converted = np.asarray(converted, dtype=np.float64)
    if space is ColorSpace.CIELAB:
        rgb01 = _lab_to_rgb01(converted)
    elif space is ColorSpace.RGB:
        rgb01 = converted
    else:
        raise ConfigurationError(f"no inverse conversion registered for {space.value}")
    return np.clip(np.rint(rgb01 * 255.0), 0.0, 255.0).astype(np.uint8)


def shunt(converted: np.ndarray, space: ColorSpace = DEFAULT_SPACE) -> ChannelGroup:
    """Split a converted image into three standardized single-channel planes.

    Each plane is normalized as ``(value - mean) / scale`` with the fixed
    constants from :data:`CHANNEL_NORMALIZATION`.  Channel order is
    preserved: plane 1 is the core channel.
    """
    converted = np.asarray(converted)
    if converted.ndim < 1 or converted.shape[-1] != 3:
        raise ShapeError(
            f"expected exactly 3 channels in the trailing dimension, got shape {converted.shape}"
        )
    means, scales = CHANNEL_NORMALIZATION[space]
    planes = []
    for c in range(3):
        planes.append((converted[..., c].astype(np.float64) - means[c]) / scales[c])
    return ChannelGroup(*planes)


def unshunt(group: ChannelGroup, space: ColorSpace = DEFAULT_SPACE) -> np.ndarray:
    """Undo the shunt normalization and reassemble the (..., 3) image."""
    means, scales = CHANNEL_NORMALIZATION[space]
    planes = [group.planes[c] * scales[c] + means[c] for c in range(3)]
    return np.stack(planes, axis=-1)
