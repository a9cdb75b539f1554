"""Coreset memory bank of normal patch features and nearest-neighbour scoring."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .backbone import FeatureExtractor, patch_embeddings
from .data import ConfigError, DatasetSplit, to_tensor

BANK_MAGIC = b"TCADBNK1"


@dataclass
class ScoringConfig:
    b: int = 9
    smoothing_sigma: float = 4.0
    upsampling: str = "bilinear"

    def validate(self) -> "ScoringConfig":
        if self.b < 1:
            raise ConfigError("b must be >= 1")
        if self.b == 1:
            raise ConfigError("b = 1 makes every re-weighted score zero; use b >= 2")
        if self.smoothing_sigma < 0:
            raise ConfigError("smoothing_sigma must be >= 0")
        if self.upsampling != "bilinear":
            raise ConfigError("only bilinear upsampling is supported")
        return self


@dataclass
class ScoreMap:
    patch_scores: np.ndarray  # (h, w)
    pixel_map: np.ndarray  # (H, W)
    image_score: float


@dataclass
class MemoryBank:
    coreset: torch.Tensor  # (k, d)
    full_size: int
    ratio: float
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    start_index: int = 0
    extractor_hash: str = ""
    b: int = 9
    _knn: Optional[torch.Tensor] = field(default=None, repr=False)

    def __len__(self):
        return self.coreset.shape[0]

    @property
    def dim(self) -> int:
        return self.coreset.shape[1]

    def neighbours(self, b: int) -> torch.Tensor:
        """(k, b) indices of the ``b`` coreset vectors nearest to each coreset vector,
        the vector itself first."""
        if b > len(self):
            raise ConfigError(f"b={b} exceeds coreset size {len(self)}")
        if self._knn is None or self._knn.shape[1] < b:
            C = self.coreset
            out = []
            for start in range(0, len(C), 4096):
                chunk = C[start:start + 4096]
                d = torch.cdist(chunk, C, compute_mode="donot_use_mm_for_euclid_dist")
                rows = torch.arange(chunk.shape[0])
                d[rows, rows + start] = -1.0
                out.append(torch.topk(d, b, dim=1, largest=False).indices)
            self._knn = torch.cat(out)
        return self._knn[:, :b]


def coreset_size(n: int, ratio: float) -> int:
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"ratio must lie in (0, 1], got {ratio}")
    return max(1, min(n, math.ceil(ratio * n - 1e-9)))


def greedy_coreset(features: torch.Tensor, k: int, start: int = 0) -> List[int]:
    """Greedy k-center selection: repeatedly add the remaining point farthest
    from the current selection."""
    X = torch.as_tensor(features)
    n = X.shape[0]
    if not 0 < k <= n:
        raise ValueError(f"need 0 < k <= {n}, got {k}")
    selected = [int(start)]
    min_d = torch.linalg.vector_norm(X - X[start], dim=1)
    taken = torch.zeros(n, dtype=torch.bool)
    taken[start] = True
    for _ in range(k - 1):
        cand = min_d.masked_fill(taken, -1.0)
        nxt = int(torch.argmax(cand))
        selected.append(nxt)
        taken[nxt] = True
        min_d = torch.minimum(min_d, torch.linalg.vector_norm(X - X[nxt], dim=1))
    return selected


def covering_radius(features, centers) -> float:
    X = torch.as_tensor(features)
    C = torch.as_tensor(centers)
    return float(torch.cdist(X, C, compute_mode="donot_use_mm_for_euclid_dist").min(dim=1).values.max())


def bank_from_features(features: torch.Tensor, ratio: float, seed: int = 0,
                       extractor_hash: str = "", b: int = 9) -> MemoryBank:
    n = features.shape[0]
    if n == 0:
        raise ValueError("no features to build a bank from")
    k = coreset_size(n, ratio)
    start = int(np.random.default_rng(seed).permutation(n)[0])
    idx = greedy_coreset(features, k, start)
    return MemoryBank(features[idx].clone(), n, ratio, np.asarray(idx), start, extractor_hash, b)


@torch.no_grad()
def extract_patches(samples: Sequence, extractor: FeatureExtractor, levels=(2, 3),
                    neighborhood: int = 3, batch_size: int = 16) -> torch.Tensor:
    """(N, h, w, d) aggregated patch features of preprocessed samples."""
    extractor.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        out.append(patch_embeddings(extractor(to_tensor(samples[i:i + batch_size])),
                                    levels, neighborhood))
    return torch.cat(out)


def build_bank(train: DatasetSplit, extractor: FeatureExtractor, ratio: float = 0.1,
               seed: int = 0, levels=(2, 3), neighborhood: int = 3,
               extractor_hash: str = "", b: int = 9) -> MemoryBank:
    if len(train) == 0:
        raise ValueError("empty training split")
    feats = extract_patches(train.samples, extractor, levels, neighborhood)
    return bank_from_features(feats.reshape(-1, feats.shape[-1]), ratio, seed, extractor_hash, b)


def score_patches(patches: torch.Tensor, bank: MemoryBank, cfg: ScoringConfig):
    """Re-weighted nearest-neighbour scores for an (m, d) batch of patches.

    Returns (s, s_prime): s_prime is the distance to the nearest coreset vector
    c*; s scales it by 1 - softmax weight of c* among the b coreset neighbours
    of c*, with distances measured from the patch.
    """
    if patches.dim() != 2 or patches.shape[1] != bank.dim:
        raise ValueError(f"patch dim {tuple(patches.shape)} does not match bank dim {bank.dim}")
    P = patches.to(bank.coreset.dtype)
    d = torch.cdist(P, bank.coreset, compute_mode="donot_use_mm_for_euclid_dist")
    s_prime, nearest = d.min(dim=1)
    nb = bank.neighbours(cfg.b)[nearest]  # (m, b)
    e = d.gather(1, nb)
    top = e.max(dim=1).values
    weight = torch.exp(s_prime - top) / torch.exp(e - top[:, None]).sum(dim=1)
    return (1.0 - weight) * s_prime, s_prime


def score_patch(p: torch.Tensor, bank: MemoryBank, cfg: ScoringConfig) -> float:
    p = torch.as_tensor(p)
    if p.dim() != 1:
        raise ValueError("expected a single feature vector")
    return float(score_patches(p[None], bank, cfg)[0][0])


def smooth_map(patch_scores: torch.Tensor, size, sigma: float) -> np.ndarray:
    up = F.interpolate(patch_scores[None, None].float(), size=tuple(size), mode="bilinear",
                       align_corners=False)[0, 0].numpy().astype(np.float64)
    if sigma > 0:
        up = gaussian_filter(up, sigma=sigma, mode="reflect")
    return np.maximum(up, 0.0)


@torch.no_grad()
def score_images(samples: Sequence, bank: MemoryBank, extractor: FeatureExtractor,
                 cfg: ScoringConfig, levels=(2, 3), neighborhood: int = 3) -> List[ScoreMap]:
    cfg.validate()
    feats = extract_patches(samples, extractor, levels, neighborhood)
    out = []
    for sample, f in zip(samples, feats):
        h, w, d = f.shape
        s, _ = score_patches(f.reshape(h * w, d), bank, cfg)
        grid = s.reshape(h, w)
        pixel = smooth_map(grid, sample.pixels.shape[:2], cfg.smoothing_sigma)
        out.append(ScoreMap(grid.double().numpy(), pixel, float(grid.max())))
    return out


def score_image(sample, bank: MemoryBank, extractor: FeatureExtractor, cfg: ScoringConfig,
                levels=(2, 3), neighborhood: int = 3) -> ScoreMap:
    return score_images([sample], bank, extractor, cfg, levels, neighborhood)[0]


# -- bank file: magic, u32 header length, JSON header, float32 LE rows -----------------

def save_bank(path, bank: MemoryBank) -> None:
    header = {
        "dim": bank.dim,
        "count": len(bank),
        "full_size": bank.full_size,
        "ratio": bank.ratio,
        "b": bank.b,
        "start_index": bank.start_index,
        "extractor_hash": bank.extractor_hash,
        "indices": [int(i) for i in bank.indices],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    data = bank.coreset.detach().cpu().numpy().astype("<f4", copy=False)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(np.ascontiguousarray(data).tobytes())


def load_bank(path) -> MemoryBank:
    with open(path, "rb") as fh:
        if fh.read(8) != BANK_MAGIC:
            raise ValueError(f"{path} is not a memory bank file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        data = np.frombuffer(fh.read(), dtype="<f4")
    k, d = header["count"], header["dim"]
    if data.size != k * d:
        raise ValueError(f"{path}: expected {k * d} floats, found {data.size}")
    coreset = torch.from_numpy(data.reshape(k, d).astype(np.float32))
    return MemoryBank(coreset, header["full_size"], header["ratio"],
                      np.asarray(header["indices"], dtype=np.int64), header["start_index"],
                      header["extractor_hash"], header["b"])
