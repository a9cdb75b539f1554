"""Pseudo-anomaly generators: Perlin-noise texture injection, CutPaste and
Poisson-blended patches (NSA style).

Every generator is a pure function of its inputs and an integer seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import splu

from .data import ConfigError, ImageSample, resize_array

log = logging.getLogger(__name__)

GENERATORS = ("perlin", "cutpaste", "nsa")


class SynthesisError(RuntimeError):
    pass


@dataclass
class NoiseField:
    values: np.ndarray
    seed: int
    period_x: int
    period_y: int


@dataclass
class GeneratorConfig:
    kind: str = "perlin"
    perlin_threshold: float = 0.5
    period_exponent_range: Tuple[int, int] = (2, 5)
    opacity_range: Tuple[float, float] = (0.15, 1.0)
    slight_angle_range: Tuple[float, float] = (-5.0, 5.0)
    right_angles: Tuple[int, ...] = (0, 90, 180, 270)
    texture_source: str = "self"  # "self" or "external"
    texture_dir: Optional[str] = None
    max_retries: int = 10
    patch_area_range: Tuple[float, float] = (0.02, 0.15)
    patch_aspect_range: Tuple[float, float] = (0.3, 3.3)

    def validate(self) -> "GeneratorConfig":
        if self.kind not in GENERATORS:
            raise ConfigError(f"unknown generator {self.kind!r}; expected one of {GENERATORS}")
        if not 0.0 < self.perlin_threshold < 1.0:
            raise ConfigError("perlin_threshold must lie in (0, 1)")
        lo, hi = self.opacity_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError("opacity_range must lie within (0, 1]")
        klo, khi = self.period_exponent_range
        if not (0 <= klo <= khi):
            raise ConfigError("bad period_exponent_range")
        if any(a % 90 for a in self.right_angles) or not self.right_angles:
            raise ConfigError("right_angles must be a nonempty set of multiples of 90")
        if self.texture_source not in ("self", "external"):
            raise ConfigError("texture_source must be 'self' or 'external'")
        if self.texture_source == "external" and not self.texture_dir:
            raise ConfigError("texture_source 'external' needs texture_dir")
        if self.max_retries < 1:
            raise ConfigError("max_retries must be >= 1")
        alo, ahi = self.patch_area_range
        if not (0.0 < alo <= ahi < 1.0):
            raise ConfigError("patch_area_range must lie within (0, 1)")
        return self


@dataclass
class SyntheticAnomaly:
    image: np.ndarray
    mask: np.ndarray
    generator: str
    source: str = ""
    base: Optional[np.ndarray] = field(default=None, repr=False)  # rotated base, I_R

    def __post_init__(self):
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError("mask and image dims differ")


# -- Perlin noise -------------------------------------------------------------------

def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def lattice_gradients(cells_y: int, cells_x: int, seed: int) -> np.ndarray:
    """Unit gradient vectors (gx, gy) at the (cells_y+1) x (cells_x+1) lattice corners."""
    angles = np.random.default_rng(seed).uniform(0.0, 2 * np.pi, size=(cells_y + 1, cells_x + 1))
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def perlin_field(h: int, w: int, period_x: int, period_y: int, seed: int) -> NoiseField:
    """2-D gradient noise with lattice spacing ``period_x`` x ``period_y`` pixels.

    The lattice is padded to a whole number of cells and the result cropped to
    ``h`` x ``w``. Values vanish on lattice points.
    """
    if h <= 0 or w <= 0 or period_x <= 0 or period_y <= 0:
        raise ValueError(f"dims and periods must be positive, got {(h, w, period_x, period_y)}")
    cy, cx = math.ceil(h / period_y), math.ceil(w / period_x)
    grads = lattice_gradients(cy, cx, seed)

    ys = np.arange(cy * period_y)[:h]
    xs = np.arange(cx * period_x)[:w]
    iy, fy = ys // period_y, (ys % period_y) / period_y
    ix, fx = xs // period_x, (xs % period_x) / period_x
    iy, ix = np.meshgrid(iy, ix, indexing="ij")
    fy, fx = np.meshgrid(fy, fx, indexing="ij")

    def corner(dy, dx):
        g = grads[iy + dy, ix + dx]
        return g[..., 0] * (fx - dx) + g[..., 1] * (fy - dy)

    u, v = _fade(fx), _fade(fy)
    top = corner(0, 0) + u * (corner(0, 1) - corner(0, 0))
    bottom = corner(1, 0) + u * (corner(1, 1) - corner(1, 0))
    # unit gradients bound raw 2-D noise by sqrt(2)/2; rescale to [-1, 1]
    values = math.sqrt(2.0) * (top + v * (bottom - top))
    return NoiseField(values, seed, period_x, period_y)


def binarize(field: NoiseField, threshold: float) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.abs(field.values) > threshold).astype(np.uint8)


def perlin_mask(h: int, w: int, cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    klo, khi = cfg.period_exponent_range
    kx, ky = rng.integers(klo, khi + 1, size=2)
    seed = int(rng.integers(0, 2**31 - 1))
    return binarize(perlin_field(h, w, 2 ** int(kx), 2 ** int(ky), seed), cfg.perlin_threshold)


# -- helpers ------------------------------------------------------------------------

def rotate(image: np.ndarray, angle: float, right_angle: int) -> np.ndarray:
    """Rotate by a small ``angle`` (degrees, reflect padding) then by ``right_angle``."""
    out = image
    if angle != 0.0:
        out = ndimage.rotate(out, angle, axes=(1, 0), reshape=False, order=1, mode="reflect")
        out = np.clip(out, 0.0, 1.0)
    k = (right_angle // 90) % 4
    if k:
        out = np.rot90(out, k=k, axes=(0, 1))
    return np.ascontiguousarray(out, dtype=image.dtype)


def blend(rotated: np.ndarray, texture: np.ndarray, mask: np.ndarray, beta: float) -> np.ndarray:
    """(1 - beta*m) * I_R + beta * m * (texture AND m)."""
    m = mask.astype(rotated.dtype)[..., None]
    region = texture * m
    return (1.0 - beta * m) * rotated + beta * m * region


def synthesize_perlin(base: ImageSample, texture: np.ndarray, cfg: GeneratorConfig,
                      seed: int) -> SyntheticAnomaly:
    if base.label != 0:
        raise ValueError("anomalies are synthesized from normal samples only")
    rng = np.random.default_rng(seed)
    h, w = base.size
    angle = float(rng.uniform(*cfg.slight_angle_range))
    choices = cfg.right_angles if h == w else tuple(a for a in cfg.right_angles if a % 180 == 0) or (0,)
    right = int(rng.choice(choices))
    rotated = rotate(base.pixels, angle, right)

    for attempt in range(cfg.max_retries):
        mask = perlin_mask(h, w, cfg, rng)
        if mask.any():
            break
        log.debug("empty Perlin mask for %s (attempt %d)", base.path, attempt + 1)
    else:
        raise SynthesisError(
            f"no nonempty mask after {cfg.max_retries} attempts (threshold {cfg.perlin_threshold})"
        )

    tex = resize_array(np.asarray(texture, dtype=np.float32), (h, w))
    beta = float(rng.uniform(*cfg.opacity_range))
    image = blend(rotated, tex, mask, beta).astype(np.float32)
    return SyntheticAnomaly(image, mask, "perlin", base.path, rotated)


def _sample_patch(h: int, w: int, cfg: GeneratorConfig, rng) -> Tuple[int, int]:
    area = rng.uniform(*cfg.patch_area_range) * h * w
    lo, hi = cfg.patch_aspect_range
    aspect = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    ph = int(np.clip(round(math.sqrt(area * aspect)), 1, h))
    pw = int(np.clip(round(math.sqrt(area / aspect)), 1, w))
    return ph, pw


# -- CutPaste -----------------------------------------------------------------------

def cutpaste(image: np.ndarray, patch_h: int, patch_w: int, src: Tuple[int, int],
             dst: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Copy the ``patch_h`` x ``patch_w`` block at ``src`` (top, left) to ``dst``."""
    h, w = image.shape[:2]
    if patch_h <= 0 or patch_w <= 0 or patch_h > h or patch_w > w:
        raise ValueError(f"patch {patch_h}x{patch_w} does not fit image {h}x{w}")
    for top, left in (src, dst):
        if top < 0 or left < 0 or top + patch_h > h or left + patch_w > w:
            raise ValueError(f"patch at {(top, left)} exceeds image bounds")
    out = image.copy()
    out[dst[0]:dst[0] + patch_h, dst[1]:dst[1] + patch_w] = \
        image[src[0]:src[0] + patch_h, src[1]:src[1] + patch_w]
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[dst[0]:dst[0] + patch_h, dst[1]:dst[1] + patch_w] = 1
    if tuple(src) == tuple(dst):
        log.warning("cutpaste patch pasted onto its own source location")
    return out, mask


def synthesize_cutpaste(base: ImageSample, seed: int,
                        cfg: Optional[GeneratorConfig] = None) -> SyntheticAnomaly:
    if base.label != 0:
        raise ValueError("anomalies are synthesized from normal samples only")
    cfg = cfg or GeneratorConfig(kind="cutpaste")
    rng = np.random.default_rng(seed)
    h, w = base.size
    ph, pw = _sample_patch(h, w, cfg, rng)
    src = (int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1)))
    dst = (int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1)))
    image, mask = cutpaste(base.pixels, ph, pw, src, dst)
    return SyntheticAnomaly(image, mask, "cutpaste", base.path, base.pixels)


# -- Poisson blending (NSA) ---------------------------------------------------------

_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def poisson_blend(base: np.ndarray, donor: np.ndarray, dst: Tuple[int, int],
                  src: Tuple[int, int], size: Tuple[int, int]) -> np.ndarray:
    """Gradient-domain blend of ``donor[src:src+size]`` into ``base[dst:dst+size]``.

    Solves the discrete Poisson equation on the rectangle with Dirichlet values
    from ``base`` on its outer ring; the guidance field is the donor gradient
    (zero where a donor neighbour falls off the image). The rectangle needs a
    one-pixel margin inside ``base``. The result is not clipped.
    """
    H, W = base.shape[:2]
    ph, pw = size
    top, left = dst
    stop, sleft = src
    if top < 1 or left < 1 or top + ph > H - 1 or left + pw > W - 1:
        raise ValueError("blend region needs a one-pixel margin inside the base image")
    if stop < 0 or sleft < 0 or stop + ph > donor.shape[0] or sleft + pw > donor.shape[1]:
        raise ValueError("donor region exceeds donor image")

    n = ph * pw
    idx = np.arange(n).reshape(ph, pw)
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.full(n, 4.0)]
    C = base.shape[2]
    rhs = np.zeros((n, C))
    yy, xx = np.meshgrid(np.arange(ph), np.arange(pw), indexing="ij")
    b64 = base.astype(np.float64)
    d64 = donor.astype(np.float64)
    for dy, dx in _NEIGHBOURS:
        ny, nx = yy + dy, xx + dx
        inside = (ny >= 0) & (ny < ph) & (nx >= 0) & (nx < pw)
        rows.append(idx[inside])
        cols.append(idx[ny[inside], nx[inside]])
        vals.append(np.full(inside.sum(), -1.0))
        out = ~inside
        rhs[idx[out]] += b64[top + ny[out], left + nx[out]]
        # guidance v_pq = donor(p) - donor(q)
        sy, sx = stop + yy, sleft + xx
        qy, qx = sy + dy, sx + dx
        valid = (qy >= 0) & (qy < donor.shape[0]) & (qx >= 0) & (qx < donor.shape[1])
        grad = np.zeros((ph, pw, C))
        grad[valid] = d64[sy[valid], sx[valid]] - d64[qy[valid], qx[valid]]
        rhs += grad.reshape(n, C)
    A = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    sol = splu(A).solve(rhs)
    resid = np.abs(A @ sol - rhs).max()
    if not np.isfinite(sol).all() or resid > 1e-6 * max(1.0, np.abs(rhs).max()):
        raise SynthesisError(f"Poisson solve failed (residual {resid:.3g})")
    out = b64.copy()
    out[top:top + ph, left:left + pw] = sol.reshape(ph, pw, C)
    return out


def synthesize_nsa(base: ImageSample, donor: ImageSample, seed: int,
                   cfg: Optional[GeneratorConfig] = None) -> SyntheticAnomaly:
    if base.label != 0 or donor.label != 0:
        raise ValueError("anomalies are synthesized from normal samples only")
    if base.pixels.shape != donor.pixels.shape:
        raise ValueError("base and donor must have equal dims")
    cfg = cfg or GeneratorConfig(kind="nsa")
    rng = np.random.default_rng(seed)
    h, w = base.size
    if h < 3 or w < 3:
        raise ValueError("image too small for a blended patch")
    ph, pw = _sample_patch(h - 2, w - 2, cfg, rng)
    dst = (int(rng.integers(1, h - ph)), int(rng.integers(1, w - pw)))
    src = (int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1)))
    blended = poisson_blend(base.pixels, donor.pixels, dst, src, (ph, pw))
    image = np.clip(blended, 0.0, 1.0).astype(np.float32)
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[dst[0]:dst[0] + ph, dst[1]:dst[1] + pw] = 1
    return SyntheticAnomaly(image, mask, "nsa", base.path, base.pixels)


def synthesize(base: ImageSample, cfg: GeneratorConfig, seed: int,
               texture: Optional[np.ndarray] = None,
               donor: Optional[ImageSample] = None) -> SyntheticAnomaly:
    if cfg.kind == "perlin":
        if texture is None:
            raise ValueError("Perlin generator needs a texture image")
        return synthesize_perlin(base, texture, cfg, seed)
    if cfg.kind == "cutpaste":
        return synthesize_cutpaste(base, seed, cfg)
    if cfg.kind == "nsa":
        if donor is None:
            raise ValueError("NSA generator needs a donor image")
        return synthesize_nsa(base, donor, seed, cfg)
    raise ConfigError(f"unknown generator {cfg.kind!r}")


class AnomalySource:
    """Draws synthetic anomalies for training sample ``i`` of a split.

    Perlin textures come from ``textures`` when given (uniform choice) and
    otherwise from a different training image of the same split; NSA donors
    are always other training images.
    """

    def __init__(self, train, cfg: GeneratorConfig, textures=None):
        self.train = train
        self.cfg = cfg
        self.textures = list(textures.images if hasattr(textures, "images") else textures or [])
        if cfg.texture_source == "external" and not self.textures:
            raise ConfigError("external texture corpus configured but empty")

    def _other(self, i: int, rng) -> int:
        n = len(self.train)
        if n == 1:
            return 0
        j = int(rng.integers(0, n - 1))
        return j + 1 if j >= i else j

    def draw(self, i: int, seed: int) -> SyntheticAnomaly:
        rng = np.random.default_rng(seed)
        base = self.train[i]
        sub_seed = int(rng.integers(0, 2**31 - 1))
        texture = donor = None
        if self.cfg.kind == "perlin":
            if self.textures:
                texture = self.textures[int(rng.integers(0, len(self.textures)))]
            else:
                texture = self.train[self._other(i, rng)].pixels
        elif self.cfg.kind == "nsa":
            donor = self.train[self._other(i, rng)]
        return synthesize(base, self.cfg, sub_seed, texture=texture, donor=donor)
