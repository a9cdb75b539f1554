"""Stage II: negative-guided contrastive fine-tuning of the feature extractor.

A SimSiam-style network (shared projector, predictor, stop-gradient on the
projector branch) supplies the positive-pair term; the frozen stage-I decoder
supplies the negative term through its segmentation loss on synthetic
anomalies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.transforms import v2

from .backbone import BackboneStateError, FeatureExtractor, FeaturePyramid, pooled_views
from .data import ConfigError, DatasetSplit, ImageSample
from .discriminative import (Decoder, FocalParams, batches, segmentation_loss, step_seed,
                             synthetic_batch)
from .synthesis import AnomalySource, GeneratorConfig

log = logging.getLogger(__name__)

AUGMENTATIONS = ("random_resized_crop", "color_jitter", "grayscale")


class NumericError(ArithmeticError):
    pass


@dataclass
class NclConfig:
    lam: float = 0.5
    levels: Tuple[int, ...] = (3, 4)
    views: int = 2
    augmentations: Tuple[str, ...] = AUGMENTATIONS
    neg_loss: str = "focal"
    concat: bool = False
    architecture: str = "simsiam"
    crop_scale: Tuple[float, float] = (0.5, 1.0)
    jitter: Tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_p: float = 0.8
    grayscale_p: float = 0.2
    proj_dim: int = 2048
    proj_hidden: Optional[int] = None  # defaults to the level's channel width
    pred_hidden: int = 512

    def validate(self) -> "NclConfig":
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.views < 2:
            raise ConfigError("need at least two views")
        if not self.levels or not set(self.levels) <= {1, 2, 3, 4}:
            raise ConfigError(f"levels must be a nonempty subset of 1..4, got {self.levels}")
        unknown = set(self.augmentations) - set(AUGMENTATIONS)
        if unknown:
            raise ConfigError(f"unknown augmentations {sorted(unknown)}")
        if self.neg_loss not in ("focal", "cross_entropy"):
            raise ConfigError("neg_loss must be 'focal' or 'cross_entropy'")
        if self.architecture != "simsiam":
            # the momentum-encoder arm is a config placeholder only
            raise ConfigError(f"contrastive architecture {self.architecture!r} is not available")
        return self


@dataclass
class ViewPair:
    views: List[torch.Tensor]  # M tensors, (C, H, W)
    base: str = ""


def build_augmentation(cfg: NclConfig, size):
    ops = []
    for name in cfg.augmentations:
        if name == "random_resized_crop":
            ops.append(v2.RandomResizedCrop(size, scale=cfg.crop_scale, antialias=True))
        elif name == "color_jitter":
            ops.append(v2.RandomApply([v2.ColorJitter(*cfg.jitter)], p=cfg.jitter_p))
        elif name == "grayscale":
            ops.append(v2.RandomGrayscale(p=cfg.grayscale_p))
    return v2.Compose(ops) if ops else v2.Identity()


def augment_views(sample: ImageSample, cfg: NclConfig, seed: int) -> ViewPair:
    if sample.label != 0:
        raise ValueError("views are built from normal samples only")
    img = torch.from_numpy(np.array(sample.pixels, dtype=np.float32)).permute(2, 0, 1)
    aug = build_augmentation(cfg, tuple(img.shape[-2:]))
    views = []
    for k in range(cfg.views):
        with torch.random.fork_rng():
            torch.manual_seed(step_seed(seed, k))
            views.append(aug(img.clone()).clamp(0.0, 1.0).contiguous())
    return ViewPair(views, sample.path)


# -- heads --------------------------------------------------------------------------

def projector(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
        nn.Linear(hidden, hidden, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
        nn.Linear(hidden, out_dim),
    )


def predictor(dim: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(dim, hidden, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
        nn.Linear(hidden, dim),
    )


class ContrastiveHead(nn.Module):
    """Projector g and predictor h; ``forward`` returns (p, z) = (h(g(f)), g(f))."""

    def __init__(self, projector: nn.Module, predictor: nn.Module):
        super().__init__()
        self.projector = projector
        self.predictor = predictor

    @classmethod
    def build(cls, in_dim: int, proj_dim: int = 2048, proj_hidden: Optional[int] = None,
              pred_hidden: int = 512) -> "ContrastiveHead":
        return cls(projector(in_dim, proj_hidden or in_dim, proj_dim), predictor(proj_dim, pred_hidden))

    @classmethod
    def identity(cls) -> "ContrastiveHead":
        return cls(nn.Identity(), nn.Identity())

    def forward(self, f: torch.Tensor):
        z = self.projector(f)
        return self.predictor(z), z


class ContrastiveNet(nn.Module):
    """One head per selected level, or a single head over concatenated levels."""

    def __init__(self, channels: Sequence[int], cfg: NclConfig):
        super().__init__()
        self.levels = tuple(sorted(cfg.levels))
        self.concat = cfg.concat
        widths = {l: channels[l - 1] for l in self.levels}
        self.heads = nn.ModuleDict()
        if self.concat:
            d = sum(widths.values())
            self.heads["cat"] = ContrastiveHead.build(d, cfg.proj_dim, cfg.proj_hidden, cfg.pred_hidden)
        else:
            for l, d in widths.items():
                self.heads[str(l)] = ContrastiveHead.build(d, cfg.proj_dim, cfg.proj_hidden,
                                                           cfg.pred_hidden)

    def features(self, pyramid: FeaturePyramid) -> Dict[str, torch.Tensor]:
        pooled = pooled_views(pyramid, self.levels)
        if self.concat:
            return {"cat": torch.cat(pooled, dim=1)}
        return {str(l): v for l, v in zip(self.levels, pooled)}


# -- losses -------------------------------------------------------------------------

def cosine_loss(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Negative cosine similarity, averaged over the batch; z is a constant."""
    z = z.detach()
    if p.shape != z.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(z.shape)}")
    pn = p.norm(dim=-1, keepdim=True)
    zn = z.norm(dim=-1, keepdim=True)
    if bool((pn == 0).any()) or bool((zn == 0).any()):
        raise NumericError("cosine loss of a zero-norm vector")
    return -((p / pn) * (z / zn)).sum(dim=-1).mean()


def _as_levels(f, heads):
    if isinstance(f, torch.Tensor):
        return {"_": f}, {"_": heads}
    if isinstance(heads, ContrastiveNet):
        heads = heads.heads
    return f, heads


def symmetric_loss(f1, f2, heads) -> torch.Tensor:
    """0.5 D(p1, SG(z2)) + 0.5 D(p2, SG(z1)), averaged over levels.

    ``f1``/``f2`` are tensors with ``heads`` a single head, or dicts
    level -> pooled features with ``heads`` a mapping level -> head.
    """
    f1, h = _as_levels(f1, heads)
    f2, _ = _as_levels(f2, heads)
    if set(f1) != set(f2):
        raise ValueError(f"level mismatch: {sorted(f1)} vs {sorted(f2)}")
    terms = []
    for k in sorted(f1):
        p1, z1 = h[k](f1[k])
        p2, z2 = h[k](f2[k])
        terms.append(0.5 * cosine_loss(p1, z2) + 0.5 * cosine_loss(p2, z1))
    return torch.stack(terms).mean()


def multiview_loss(view_features: Sequence, heads) -> torch.Tensor:
    """Pairwise symmetric loss averaged over all view pairs; equals
    :func:`symmetric_loss` for two views."""
    M = len(view_features)
    if M < 2:
        raise ValueError("need at least two views")
    per_view = [_as_levels(f, heads) for f in view_features]
    h = per_view[0][1]
    keys = sorted(per_view[0][0])
    for f, _ in per_view[1:]:
        if sorted(f) != keys:
            raise ValueError("level mismatch between views")
    terms = []
    for k in keys:
        outs = [h[k](f[k]) for f, _ in per_view]
        pair_terms = []
        for i in range(M):
            for j in range(i + 1, M):
                (pi, zi), (pj, zj) = outs[i], outs[j]
                pair_terms.append(0.5 * cosine_loss(pi, zj) + 0.5 * cosine_loss(pj, zi))
        terms.append(torch.stack(pair_terms).mean())
    return torch.stack(terms).mean()


def negative_loss(images: torch.Tensor, masks: torch.Tensor, extractor: FeatureExtractor,
                  decoder: Optional[Decoder], params: FocalParams,
                  kind: str = "focal") -> torch.Tensor:
    """Segmentation loss of the frozen decoder on synthetic anomalies, through F."""
    if decoder is None:
        raise BackboneStateError("negative loss needs a trained discriminative network")
    return segmentation_loss(kind, decoder(extractor(images)), masks, params)


def ncl_loss(l_sym, l_neg, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam * l_sym + (1.0 - lam) * l_neg


# -- training -----------------------------------------------------------------------

@dataclass
class Stage2Config:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 0.05 * 16 / 256
    momentum: float = 0.9
    weight_decay: float = 1e-4
    trainable_layers: Tuple[int, ...] = (1, 2, 3, 4)
    focal: FocalParams = field(default_factory=FocalParams)


@dataclass
class Stage2Result:
    extractor: FeatureExtractor
    net: ContrastiveNet
    epoch_rows: List[Tuple[int, float, float, float]]  # epoch, L_sym, L_neg, L_ncl
    step_sym: List[float]


def view_batch(train: DatasetSplit, idx, cfg: NclConfig, seed: int, epoch: int):
    pairs = [augment_views(train[int(i)], cfg, step_seed(seed, 2, epoch, int(i))) for i in idx]
    return [torch.stack([p.views[k] for p in pairs]) for k in range(cfg.views)]


def train_stage2(train: DatasetSplit, extractor: FeatureExtractor, decoder: Optional[Decoder],
                 gen: GeneratorConfig, ncl: NclConfig, cfg: Stage2Config, seed: int,
                 textures=None, net: Optional[ContrastiveNet] = None) -> Stage2Result:
    """Fine-tune F jointly with the contrastive heads; D stays frozen.

    With ``decoder=None`` the negative term is dropped (contrastive-only
    ablation) and the loss is L_sym alone.
    """
    if len(train) == 0:
        raise ValueError("empty training split")
    ncl.validate()
    gen.validate()
    torch.manual_seed(seed)
    net = net or ContrastiveNet(extractor.channels, ncl)
    source = AnomalySource(train, gen, textures)
    if decoder is not None:
        decoder.eval()
        for p in decoder.parameters():
            p.requires_grad_(False)
    extractor.set_trainable(cfg.trainable_layers)
    extractor.train()
    net.train()
    params = [p for p in extractor.parameters() if p.requires_grad] + list(net.parameters())
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1))
    rng = np.random.default_rng(seed)
    rows, step_sym = [], []
    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        count = 0
        for idx in batches(len(train), cfg.batch_size, rng):
            if len(idx) < 2:
                continue  # batch norm in the heads needs two samples
            views = view_batch(train, idx, ncl, seed, epoch)
            feats = [net.features(extractor(v)) for v in views]
            l_sym = multiview_loss(feats, net)
            if decoder is not None:
                images, masks = synthetic_batch(source, idx, seed, 2, epoch)
                l_neg = negative_loss(images, masks, extractor, decoder, cfg.focal, ncl.neg_loss)
                loss = ncl_loss(l_sym, l_neg, ncl.lam)
            else:
                l_neg = torch.zeros(())
                loss = l_sym
            opt.zero_grad()
            loss.backward()
            opt.step()
            step_sym.append(l_sym.item())
            sums += np.array([l_sym.item(), l_neg.item(), loss.item()]) * len(idx)
            count += len(idx)
        sched.step()
        means = sums / max(count, 1)
        rows.append((epoch, *map(float, means)))
        log.info("stage2 epoch %d L_sym %.5f L_neg %.5f L_ncl %.5f", epoch, *means)
    extractor.set_trainable(())
    extractor.eval()
    net.eval()
    return Stage2Result(extractor, net, rows, step_sym)
