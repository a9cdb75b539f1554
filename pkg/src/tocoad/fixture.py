"""Procedural desk-scale dataset in the MVTec layout.

Normal images are striped fields with a dotted overlay; test defects are
planted squares and blobs of foreign colour or pattern. A small texture
corpus is written alongside for the Perlin generator.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

CATEGORY = "stripes"


def _save(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.ndim == 2:
        Image.fromarray((arr * 255).astype(np.uint8), mode="L").save(path)
    else:
        Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(np.uint8), mode="RGB").save(path)


def normal_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    period = rng.uniform(7.5, 8.5)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * yy / period + phase)
    dots = ((xx + rng.integers(0, 6)) % 6 < 2) & ((yy + rng.integers(0, 6)) % 6 < 2)
    base = np.array([0.55, 0.45, 0.30]) + rng.normal(0, 0.02, 3)
    img = base * (0.6 + 0.3 * stripes[..., None]) + 0.06 * dots[..., None]
    img += rng.normal(0, 0.015, img.shape)
    return np.clip(img, 0, 1)


def plant_defect(img: np.ndarray, rng: np.random.Generator):
    size = img.shape[0]
    out = img.copy()
    mask = np.zeros(img.shape[:2], dtype=np.uint8)
    s = int(rng.integers(10, 17))
    cy, cx = rng.integers(s // 2 + 2, size - s // 2 - 2, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    if rng.random() < 0.5:
        region = (abs(yy - cy) <= s // 2) & (abs(xx - cx) <= s // 2)
    else:
        r = (yy - cy) ** 2 / (s / 2) ** 2 + (xx - cx) ** 2 / (s / 2.6) ** 2
        region = r <= 1.0
    kind = rng.integers(0, 3)
    if kind == 0:
        colour = np.array([0.15, 0.2, 0.55]) + rng.normal(0, 0.03, 3)
        out[region] = colour
    elif kind == 1:
        out[region] = np.clip(out[region] * 0.3, 0, 1)
    else:
        checker = ((yy // 3 + xx // 3) % 2).astype(np.float64)
        out[region] = (0.2 + 0.7 * checker[region])[:, None] * np.array([0.9, 0.9, 0.9])
    mask[region] = 1
    return out, mask


def texture_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cell = int(rng.integers(3, 9))
    checker = ((yy // cell + xx // cell) % 2)[..., None]
    c1, c2 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    img = np.where(checker == 1, c1, c2) + rng.normal(0, 0.05, (size, size, 3))
    return np.clip(img, 0, 1)


def make_fixture(root, seed: int = 0, n_train: int = 24, n_test_good: int = 10,
                 n_test_bad: int = 10, n_textures: int = 8, size: int = 64) -> Path:
    """Write the fixture under ``root``; returns the texture directory."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    cat = root / CATEGORY
    for i in range(n_train):
        _save(cat / "train" / "good" / f"{i:03d}.png", normal_image(rng, size))
    for i in range(n_test_good):
        _save(cat / "test" / "good" / f"{i:03d}.png", normal_image(rng, size))
    for i in range(n_test_bad):
        img, mask = plant_defect(normal_image(rng, size), rng)
        _save(cat / "test" / "defect" / f"{i:03d}.png", img)
        _save(cat / "ground_truth" / "defect" / f"{i:03d}_mask.png", mask.astype(np.float64))
    tex = root / "textures"
    for i in range(n_textures):
        _save(tex / f"{i:03d}.png", texture_image(rng, size))
    return tex
