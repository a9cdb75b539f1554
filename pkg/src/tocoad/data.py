"""Dataset loading for MVTec-AD style directory trees.

Layout expected under ``root``::

    <category>/train/good/*.png
    <category>/test/<defect_type>/*.png
    <category>/ground_truth/<defect_type>/<stem>_mask.png

VisA and BTAD trees are rewritten into this layout with :func:`convert_visa`
and :func:`convert_btad`.
"""

from __future__ import annotations

import csv
import hashlib
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DatasetLayoutError(FileNotFoundError):
    pass


class DatasetIntegrityError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def _freeze(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is not None:
        a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ImageSample:
    """One image, float RGB in [0, 1], HxWxC."""

    pixels: np.ndarray
    label: int = 0
    mask: Optional[np.ndarray] = None
    category: str = ""
    path: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise ValueError(f"pixels must be HxWxC, got shape {self.pixels.shape}")
        if self.mask is not None and self.mask.shape != self.pixels.shape[:2]:
            raise ValueError(
                f"mask shape {self.mask.shape} does not match image {self.pixels.shape[:2]}"
            )
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        _freeze(self.pixels)
        _freeze(self.mask)

    @property
    def size(self):
        return self.pixels.shape[:2]


@dataclass
class DatasetSplit:
    samples: List[ImageSample]
    split: str
    category: str

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.split == "train" and any(s.label != 0 for s in self.samples):
            raise DatasetIntegrityError("train split may only contain normal samples")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def checksum(self) -> str:
        return split_checksum(self)


@dataclass
class TextureCorpus:
    images: List[np.ndarray] = field(default_factory=list)
    source: str = ""

    def __len__(self):
        return len(self.images)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


def _list_images(d: Path) -> List[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _find_mask(gt_dir: Path, stem: str) -> Optional[Path]:
    for name in (f"{stem}_mask", stem):
        for suf in IMAGE_SUFFIXES:
            p = gt_dir / f"{name}{suf}"
            if p.exists():
                return p
    return None


def load_category(root, category: str, split: str) -> DatasetSplit:
    """Load one split of one category, ordered lexicographically by path.

    Test ``good`` samples receive all-zero masks; anomalous samples are paired
    with their ground-truth masks by file stem.
    """
    root = Path(root)
    cat_dir = root / category
    split_dir = cat_dir / split
    if not split_dir.is_dir():
        raise DatasetLayoutError(f"missing directory {split_dir}")

    samples = []
    if split == "train":
        good = split_dir / "good"
        if not good.is_dir():
            raise DatasetLayoutError(f"missing directory {good}")
        for p in _list_images(good):
            samples.append(ImageSample(read_image(p), 0, None, category, str(p)))
        return DatasetSplit(samples, split, category)

    if split != "test":
        raise ValueError(f"unknown split {split!r}")
    for defect_dir in sorted(d for d in split_dir.iterdir() if d.is_dir()):
        images = _list_images(defect_dir)
        if defect_dir.name == "good":
            for p in images:
                px = read_image(p)
                mask = np.zeros(px.shape[:2], dtype=np.uint8)
                samples.append(ImageSample(px, 0, mask, category, str(p)))
            continue
        gt_dir = cat_dir / "ground_truth" / defect_dir.name
        if not gt_dir.is_dir():
            raise DatasetLayoutError(f"missing directory {gt_dir}")
        n_masks = len(_list_images(gt_dir))
        if n_masks != len(images):
            raise DatasetIntegrityError(
                f"{defect_dir}: {len(images)} images but {n_masks} masks"
            )
        for p in images:
            mp = _find_mask(gt_dir, p.stem)
            if mp is None:
                raise DatasetIntegrityError(f"no ground-truth mask for {p}")
            px = read_image(p)
            mask = read_mask(mp)
            if mask.shape != px.shape[:2]:
                raise DatasetIntegrityError(f"mask/image size mismatch for {p}")
            samples.append(ImageSample(px, 1, mask, category, str(p)))
    return DatasetSplit(samples, split, category)


def load_textures(directory) -> TextureCorpus:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetLayoutError(f"missing texture directory {d}")
    images = [read_image(p) for p in _list_images(d)]
    if not images:
        raise DatasetLayoutError(f"texture directory {d} contains no images")
    return TextureCorpus(images, str(d))


def resize_array(a: np.ndarray, size, nearest: bool = False) -> np.ndarray:
    """Resize an HxW or HxWxC array to ``size`` (h, w)."""
    h, w = size
    if a.shape[:2] == (h, w):
        return a
    t = torch.from_numpy(np.array(a, dtype=np.float32))
    t = t[None, None] if a.ndim == 2 else t.permute(2, 0, 1)[None]
    if nearest:
        t = F.interpolate(t, size=(h, w), mode="nearest-exact")
    else:
        t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False, antialias=True)
        t = t.clamp(0.0, 1.0)
    out = t[0, 0] if a.ndim == 2 else t[0].permute(1, 2, 0)
    return out.numpy().astype(a.dtype, copy=False)


def _center_crop(a: np.ndarray, crop: int) -> np.ndarray:
    h, w = a.shape[:2]
    top = (h - crop) // 2
    left = (w - crop) // 2
    return a[top:top + crop, left:left + crop]


def preprocess(sample: ImageSample, resize: int, crop: int) -> ImageSample:
    """Resize to ``resize``x``resize`` then center-crop to ``crop``x``crop``.

    A sample that is already ``crop``x``crop`` is returned unchanged, so the
    operation is idempotent. Masks use nearest-neighbour interpolation.
    """
    if crop <= 0 or resize < crop:
        raise ConfigError(f"need resize >= crop > 0, got resize={resize} crop={crop}")
    if sample.pixels.shape[:2] == (crop, crop):
        return sample
    px = _center_crop(resize_array(sample.pixels, (resize, resize)), crop)
    mask = None
    if sample.mask is not None:
        mask = _center_crop(resize_array(sample.mask, (resize, resize), nearest=True), crop)
        mask = np.ascontiguousarray(mask)
    return ImageSample(np.ascontiguousarray(px), sample.label, mask, sample.category, sample.path)


def preprocess_split(split: DatasetSplit, resize: int, crop: int) -> DatasetSplit:
    return DatasetSplit([preprocess(s, resize, crop) for s in split], split.split, split.category)


def split_checksum(split: DatasetSplit) -> str:
    h = hashlib.sha256()
    for s in split:
        h.update(s.path.encode())
        h.update(np.ascontiguousarray(s.pixels, dtype=np.float32).tobytes())
        if s.mask is not None:
            h.update(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())
    return h.hexdigest()[:16]


def to_tensor(samples: Sequence[ImageSample]) -> torch.Tensor:
    """Stack samples into an NCHW float tensor."""
    arr = np.stack([s.pixels for s in samples]).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


# -- run manifest (key/value text) -------------------------------------------------

def write_manifest(path, entries: Dict[str, object]) -> None:
    lines = [f"{k} = {entries[k]}" for k in sorted(entries)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed manifest line: {line!r}")
        out[key.strip()] = value.strip()
    return out


# -- converters into the MVTec layout ----------------------------------------------

def _copy(src: Path, dst: Path) -> None:
    dst.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(src, dst)


def convert_btad(src_root, dst_root, category: str) -> None:
    """BTAD uses ``ok``/``ko`` where MVTec uses ``good``/<defect>."""
    src = Path(src_root) / category
    dst = Path(dst_root) / category
    for split in ("train", "test"):
        for sub in ("ok", "ko"):
            d = src / split / sub
            if not d.is_dir():
                continue
            name = "good" if sub == "ok" else "ko"
            for p in _list_images(d):
                _copy(p, dst / split / name / (p.stem + ".png" if p.suffix == ".png" else p.name))
    gt = src / "ground_truth" / "ko"
    if gt.is_dir():
        for p in _list_images(gt):
            _copy(p, dst / "ground_truth" / "ko" / p.name)
    if not (dst / "train" / "good").is_dir():
        raise DatasetLayoutError(f"no BTAD training images under {src}")


def convert_visa(src_root, dst_root, category: str, split_csv=None) -> None:
    """Rewrite a VisA category using its ``split_csv/1cls.csv`` split file.

    CSV columns: object, split, label, image, mask (paths relative to src_root).
    """
    src_root = Path(src_root)
    split_csv = Path(split_csv) if split_csv else src_root / "split_csv" / "1cls.csv"
    if not split_csv.exists():
        raise DatasetLayoutError(f"missing VisA split file {split_csv}")
    dst = Path(dst_root) / category
    n = 0
    with open(split_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["object"] != category:
                continue
            img = src_root / row["image"]
            normal = row["label"].strip().lower() == "normal"
            if row["split"] == "train":
                _copy(img, dst / "train" / "good" / img.name)
            elif normal:
                _copy(img, dst / "test" / "good" / img.name)
            else:
                _copy(img, dst / "test" / "bad" / img.name)
                # VisA masks store small label values, not 0/255
                with Image.open(src_root / row["mask"]) as m:
                    binary = (np.asarray(m.convert("L")) > 0).astype(np.uint8) * 255
                out = dst / "ground_truth" / "bad" / f"{img.stem}_mask.png"
                out.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(binary).save(out)
            n += 1
    if n == 0:
        raise DatasetLayoutError(f"category {category!r} not found in {split_csv}")
