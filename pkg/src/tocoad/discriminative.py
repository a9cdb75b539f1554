"""Discriminative network D, focal loss, and stage-I training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeatureExtractor, FeaturePyramid, LEVELS
from .data import ConfigError, DatasetSplit, to_tensor
from .synthesis import AnomalySource, GeneratorConfig

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7


@dataclass
class FocalParams:
    alpha_anomalous: float = 0.75
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha_anomalous < 1.0:
            raise ConfigError("alpha_anomalous must lie in (0, 1)")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")


@dataclass
class PredictedMask:
    logits: torch.Tensor  # (B, 2, H, W)

    @property
    def probabilities(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)

    @property
    def anomaly_map(self) -> torch.Tensor:
        return self.probabilities[:, 1]


class Decoder(nn.Module):
    """Mirror of the extractor: upsample x2, concatenate the shallower level,
    compress with a 1x1 conv; finally upsample x4 to the input size and
    predict two channels (normal, anomalous)."""

    def __init__(self, channels: Sequence[int], head_width: Optional[int] = None):
        super().__init__()
        c = dict(zip(LEVELS, channels))
        head_width = head_width or max(16, c[1] // 4)
        self.fuse = nn.ModuleDict()
        width = c[4]
        for level in (3, 2, 1):
            self.fuse[str(level)] = nn.Sequential(
                nn.Conv2d(width + c[level], c[level], 1), nn.ReLU(inplace=True),
                nn.Conv2d(c[level], c[level], 3, padding=1), nn.ReLU(inplace=True),
            )
            width = c[level]
        self.compress = nn.Sequential(nn.Conv2d(width, head_width, 1), nn.ReLU(inplace=True))
        self.head = nn.Sequential(
            nn.Conv2d(head_width, head_width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(head_width, 2, 1),
        )

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        if not pyramid.is_complete():
            raise ValueError(f"decoder needs levels {LEVELS}, got {sorted(pyramid.layers)}")
        x = pyramid[4]
        for level in (3, 2, 1):
            skip = pyramid[level]
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = self.fuse[str(level)](torch.cat([x, skip], dim=1))
        x = self.compress(x)
        x = F.interpolate(x, size=pyramid.source_dims, mode="bilinear", align_corners=False)
        return self.head(x)

    def decode(self, pyramid: FeaturePyramid) -> PredictedMask:
        return PredictedMask(self(pyramid))


def focal_loss(pred, target: torch.Tensor, alpha: Optional[float] = 0.75,
               gamma: float = 2.0) -> torch.Tensor:
    """Mean over pixels of ``-alpha_t (1 - p_t)^gamma log(p_t)``.

    ``pred`` is a :class:`PredictedMask` or (B, 2, H, W) logits; ``target`` is a
    binary (B, H, W) mask. ``alpha`` weights the anomalous class (the normal
    class gets ``1 - alpha``); ``alpha=None`` weights both classes by 1.
    """
    logits = pred.logits if isinstance(pred, PredictedMask) else pred
    if logits.dim() == 3:
        logits = logits[None]
    target = torch.as_tensor(target, device=logits.device)
    if target.dim() == 2:
        target = target[None]
    if target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValueError(f"target shape {tuple(target.shape)} does not match {tuple(logits.shape)}")
    if not torch.all((target == 0) | (target == 1)):
        raise ValueError("target mask must be binary")
    t = target.long()
    logp = torch.log_softmax(logits, dim=1)
    logp_t = logp.gather(1, t[:, None]).squeeze(1).clamp_min(math.log(PROB_FLOOR))
    p_t = logp_t.exp()
    loss = -((1.0 - p_t) ** gamma) * logp_t
    if alpha is not None:
        alpha_t = torch.where(t == 1, alpha, 1.0 - alpha).to(loss.dtype)
        loss = alpha_t * loss
    return loss.mean()


def cross_entropy_loss(pred, target) -> torch.Tensor:
    return focal_loss(pred, target, alpha=None, gamma=0.0)


def segmentation_loss(kind: str, pred, target, params: FocalParams) -> torch.Tensor:
    if kind == "focal":
        return focal_loss(pred, target, params.alpha_anomalous, params.gamma)
    if kind == "cross_entropy":
        return cross_entropy_loss(pred, target)
    raise ConfigError(f"unknown loss {kind!r}")


@dataclass
class Stage1Config:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    lr_milestones: Tuple[int, ...] = (80, 90)
    lr_decay: float = 0.2
    focal: FocalParams = field(default_factory=FocalParams)


@dataclass
class Stage1Result:
    decoder: Decoder
    epoch_losses: List[float]


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def step_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def synthetic_batch(source: AnomalySource, idx, seed: int, stage: int, epoch: int):
    items = [source.draw(int(i), step_seed(seed, stage, epoch, int(i))) for i in idx]
    images = torch.from_numpy(np.stack([a.image for a in items])).permute(0, 3, 1, 2).float()
    masks = torch.from_numpy(np.stack([a.mask for a in items])).long()
    return images.contiguous(), masks


def train_stage1(train: DatasetSplit, extractor: FeatureExtractor, gen: GeneratorConfig,
                 cfg: Stage1Config, seed: int, decoder: Optional[Decoder] = None,
                 textures=None) -> Stage1Result:
    """Train D on synthetic anomalies with F frozen; F is never modified."""
    if len(train) == 0:
        raise ValueError("empty training split")
    gen.validate()
    torch.manual_seed(seed)
    if decoder is None:
        decoder = Decoder(extractor.channels)
    source = AnomalySource(train, gen, textures)
    extractor.set_trainable(())
    extractor.eval()
    decoder.train()
    opt = torch.optim.Adam(decoder.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(cfg.lr_milestones), cfg.lr_decay)
    rng = np.random.default_rng(seed)
    losses = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in batches(len(train), cfg.batch_size, rng):
            images, masks = synthetic_batch(source, idx, seed, 1, epoch)
            with torch.no_grad():
                pyramid = extractor(images)
            loss = focal_loss(decoder(pyramid), masks, cfg.focal.alpha_anomalous, cfg.focal.gamma)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        sched.step()
        losses.append(total / count)
        log.info("stage1 epoch %d loss %.5f", epoch, losses[-1])
    decoder.eval()
    return Stage1Result(decoder, losses)


def write_loss_csv(path, header: Sequence[str], rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + [f"{v:.8f}" for v in row[1:]])
