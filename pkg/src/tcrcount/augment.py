"""Training-time image augmentation: stain shift, HSL shift, blur/sharpen,
and the eight dihedral rotation/mirror transforms.

All functions are pure; randomness always arrives as explicit per-sample
parameters or generators, never from a hidden global state.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

I0 = 255.0

#: Standard H&E optical-density stain directions (color deconvolution).
HEMATOXYLIN_OD = (0.650, 0.704, 0.286)
EOSIN_OD = (0.072, 0.990, 0.105)

#: Default augmentation parameter ranges ("small amounts").
STAIN_RANGE = (0.85, 1.15)
HUE_RANGE = 0.02          # of a full turn
SAT_RANGE = 0.1
LUM_RANGE = 0.1
BLUR_SIGMA_MAX = 0.8
SHARPEN_AMOUNT_MAX = 0.5


@dataclass(frozen=True)
class StainBasis:
    """Orthogonal-ish stain coordinate system in optical-density space."""

    hematoxylin: tuple = HEMATOXYLIN_OD
    eosin: tuple = EOSIN_OD
    matrix: np.ndarray = field(init=False, repr=False)
    inverse: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        h = np.asarray(self.hematoxylin, dtype=np.float64)
        e = np.asarray(self.eosin, dtype=np.float64)
        h = h / np.linalg.norm(h)
        e = e / np.linalg.norm(e)
        r = np.cross(h, e)
        nr = np.linalg.norm(r)
        if nr < 1e-9:
            raise ValueError("stain vectors are collinear; basis is not invertible")
        m = np.stack([h, e, r / nr])  # rows: stain directions
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "inverse", np.linalg.inv(m))


DEFAULT_BASIS = StainBasis()


def rgb_to_od(image: np.ndarray) -> np.ndarray:
    """Per-channel optical density −log10(max(I,1)/I0); float64 (H,W,3)."""
    return -np.log10(np.maximum(image.astype(np.float64), 1.0) / I0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    out = I0 * np.power(10.0, -od)
    return np.clip(np.floor(out + 0.5), 0.0, 255.0).astype(np.uint8)


def stain_shift(image: np.ndarray, h_factor: float, e_factor: float,
                basis: StainBasis = DEFAULT_BASIS) -> np.ndarray:
    """Scale the hematoxylin/eosin coefficients of every pixel in OD space.

    Factors (1, 1) round-trip within ±1 intensity level; pure white is a
    fixed point (zero optical density).
    """
    od = rgb_to_od(image)
    coeff = od @ basis.inverse  # coefficients along H, E, residual
    coeff[..., 0] *= h_factor
    coeff[..., 1] *= e_factor
    return od_to_rgb(coeff @ basis.matrix)


# ------------------------------------------------------------------- HSL

def rgb_to_hsl(image: np.ndarray) -> np.ndarray:
    """Vectorized RGB→HSL; channels in [0,1], hue in turns."""
    rgb = image.astype(np.float64) / 255.0
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    l = (mx + mn) / 2.0
    c = mx - mn
    s = np.zeros_like(l)
    nz = c > 1e-12
    denom = 1.0 - np.abs(2.0 * l - 1.0)
    s[nz] = c[nz] / np.maximum(denom[nz], 1e-12)
    h = np.zeros_like(l)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        hr = ((g - b) / c) % 6.0
        hg = (b - r) / c + 2.0
        hb = (r - g) / c + 4.0
    h = np.where(mx == r, hr, np.where(mx == g, hg, hb))
    h = np.where(nz, h / 6.0, 0.0)
    return np.stack([h, s, l], axis=-1)


def hsl_to_rgb(hsl: np.ndarray) -> np.ndarray:
    h, s, l = hsl[..., 0] % 1.0, np.clip(hsl[..., 1], 0, 1), np.clip(hsl[..., 2], 0, 1)
    c = (1.0 - np.abs(2.0 * l - 1.0)) * s
    hp = h * 6.0
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    z = np.zeros_like(c)
    conds = [hp < 1, hp < 2, hp < 3, hp < 4, hp < 5, hp >= 5]
    r = np.select(conds, [c, x, z, z, x, c])
    g = np.select(conds, [x, c, c, x, z, z])
    b = np.select(conds, [z, z, x, c, c, x])
    m = l - c / 2.0
    rgb = np.stack([r + m, g + m, b + m], axis=-1)
    return np.clip(np.floor(rgb * 255.0 + 0.5), 0, 255).astype(np.uint8)


def hsl_shift(image: np.ndarray, d_hue: float, d_sat: float, d_lum: float) -> np.ndarray:
    hsl = rgb_to_hsl(image)
    hsl[..., 0] = (hsl[..., 0] + d_hue) % 1.0
    hsl[..., 1] = np.clip(hsl[..., 1] + d_sat, 0.0, 1.0)
    hsl[..., 2] = np.clip(hsl[..., 2] + d_lum, 0.0, 1.0)
    return hsl_to_rgb(hsl)


# ----------------------------------------------------------- blur / sharpen

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled 1-D Gaussian, radius ceil(3σ), normalized to sum 1."""
    if sigma <= 0:
        return np.array([1.0])
    rad = int(np.ceil(3.0 * sigma))
    xs = np.arange(-rad, rad + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge replication; uint8 in/out."""
    if sigma <= 0:
        return image.copy()
    k = gaussian_kernel(sigma)
    rad = len(k) // 2
    img = image.astype(np.float64)
    pad = np.pad(img, ((rad, rad), (0, 0), (0, 0)), mode="edge")
    img = sum(k[i] * pad[i:i + image.shape[0]] for i in range(len(k)))
    pad = np.pad(img, ((0, 0), (rad, rad), (0, 0)), mode="edge")
    img = sum(k[i] * pad[:, i:i + image.shape[1]] for i in range(len(k)))
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def blur_sharpen(image: np.ndarray, amount: float) -> np.ndarray:
    """amount > 0: Gaussian blur of σ=amount; amount < 0: unsharp mask of
    strength |amount| (σ=1). amount 0 is the identity."""
    if amount > 0:
        return gaussian_blur(image, amount)
    if amount < 0:
        soft = gaussian_blur(image, 1.0).astype(np.float64)
        sharp = image.astype(np.float64) + (-amount) * (image.astype(np.float64) - soft)
        return np.clip(np.floor(sharp + 0.5), 0, 255).astype(np.uint8)
    return image.copy()


# ------------------------------------------------------------ rot / mirror

def rot_mirror(image: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 dihedral transforms: rotate 90° CCW (k & 3) times, then
    mirror horizontally if k & 4. Works on (H,W) maps and (H,W,C) images
    (spatial axes 0 and 1)."""
    if not 0 <= k <= 7:
        raise ValueError(f"rot_mirror index must be 0..7, got {k}")
    out = np.rot90(image, k & 3, axes=(0, 1))
    if k & 4:
        out = np.flip(out, axis=1)
    return np.ascontiguousarray(out)


def invert_rot_mirror(k: int) -> int:
    """Index of the inverse transform (mirrored variants are involutions)."""
    if k & 4:
        return k
    return (4 - (k & 3)) % 4


def rot_mirror_points(points: np.ndarray, k: int, shape: tuple[int, int]) -> np.ndarray:
    """Apply the same dihedral transform to (x, y) pixel coordinates on a
    map of the given (H, W) shape."""
    h, w = shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2).copy()
    for _ in range(k & 3):
        # rot90 CCW: (x, y) -> (y, W-1-x), frame becomes (W, H)
        pts = np.stack([pts[:, 1], (w - 1) - pts[:, 0]], axis=1)
        h, w = w, h
    if k & 4:
        pts[:, 0] = (w - 1) - pts[:, 0]
    return pts


@dataclass(frozen=True)
class AugmentParams:
    """One sampled draw of the full augmentation chain."""

    h_factor: float
    e_factor: float
    d_hue: float
    d_sat: float
    d_lum: float
    blur_amount: float  # >0 blur σ, <0 sharpen strength, 0 none
    dihedral: int

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentParams":
        if rng.random() < 0.5:
            blur = rng.uniform(0.0, BLUR_SIGMA_MAX)
        else:
            blur = -rng.uniform(0.0, SHARPEN_AMOUNT_MAX)
        return cls(
            h_factor=rng.uniform(*STAIN_RANGE),
            e_factor=rng.uniform(*STAIN_RANGE),
            d_hue=rng.uniform(-HUE_RANGE, HUE_RANGE),
            d_sat=rng.uniform(-SAT_RANGE, SAT_RANGE),
            d_lum=rng.uniform(-LUM_RANGE, LUM_RANGE),
            blur_amount=blur,
            dihedral=int(rng.integers(0, 8)),
        )


def apply_chain(image: np.ndarray, targets: np.ndarray, params: AugmentParams,
                basis: StainBasis = DEFAULT_BASIS) -> tuple[np.ndarray, np.ndarray]:
    """Full chain on a uint8 (H,W,3) patch and its (K,H,W) target stack.

    Color/blur ops touch only the image; the dihedral transform is applied
    identically to the image and every target map (label-preserving).
    """
    img = stain_shift(image, params.h_factor, params.e_factor, basis)
    img = hsl_shift(img, params.d_hue, params.d_sat, params.d_lum)
    img = blur_sharpen(img, params.blur_amount)
    img = rot_mirror(img, params.dihedral)
    maps = np.stack([rot_mirror(t, params.dihedral) for t in targets])
    return img, maps
