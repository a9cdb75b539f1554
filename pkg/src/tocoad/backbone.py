"""Feature extractor F: a 4-stage CNN returning per-stage feature maps.

Two architectures are provided: ``wide_resnet50_2`` (torchvision) and ``desk``,
a reduced-width network with the same 4/8/16/32 stride schedule that runs
on CPU in seconds and is used by the test suite and the desk fixture.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
LEVELS = (1, 2, 3, 4)


class BackboneStateError(RuntimeError):
    pass


@dataclass
class FeaturePyramid:
    layers: Dict[int, torch.Tensor]  # level -> (B, C, h, w)
    source_dims: Tuple[int, int]

    def __getitem__(self, level: int) -> torch.Tensor:
        return self.layers[level]

    def is_complete(self) -> bool:
        return all(l in self.layers for l in LEVELS)


@dataclass
class PatchFeatureSet:
    features: torch.Tensor  # (h*w, d)
    grid: Tuple[int, int]
    provenance: str = ""

    def __len__(self):
        return self.features.shape[0]


def _conv(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.ReLU(inplace=True))


def desk_stages(widths=(16, 32, 64, 128)) -> nn.ModuleList:
    c1, c2, c3, c4 = widths
    return nn.ModuleList([
        nn.Sequential(_conv(3, c1, 2), _conv(c1, c1, 2)),
        nn.Sequential(_conv(c1, c2, 2), _conv(c2, c2, 1)),
        nn.Sequential(_conv(c2, c3, 2), _conv(c3, c3, 1)),
        nn.Sequential(_conv(c3, c4, 2), _conv(c4, c4, 1)),
    ])


def wrn50_stages(pretrained: bool) -> nn.ModuleList:
    from torchvision.models import Wide_ResNet50_2_Weights, wide_resnet50_2

    weights = Wide_ResNet50_2_Weights.IMAGENET1K_V1 if pretrained else None
    net = wide_resnet50_2(weights=weights)
    return nn.ModuleList([
        nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1),
        net.layer2,
        net.layer3,
        net.layer4,
    ])


ARCHITECTURES = {
    "desk": (16, 32, 64, 128),
    "wide_resnet50_2": (256, 512, 1024, 2048),
}


class FeatureExtractor(nn.Module):
    def __init__(self, arch: str = "desk", pretrained: bool = False, seed: int = 0,
                 widths: Optional[Sequence[int]] = None):
        super().__init__()
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown backbone {arch!r}")
        self.arch = arch
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            if arch == "desk":
                self.channels = tuple(widths or ARCHITECTURES["desk"])
                self.stages = desk_stages(self.channels)
                for m in self.modules():
                    if isinstance(m, nn.Conv2d):
                        nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                        nn.init.zeros_(m.bias)
            else:
                self.channels = ARCHITECTURES[arch]
                self.stages = wrn50_stages(pretrained)
        if arch == "desk":
            mean, std = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
        else:
            mean, std = IMAGENET_MEAN, IMAGENET_STD
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))
        self.ready = True
        self.freeze_batchnorm = True
        self.set_trainable(())

    @classmethod
    def skeleton(cls, arch: str = "desk", **kw) -> "FeatureExtractor":
        """An extractor awaiting ``load_state_dict``; extraction raises until loaded."""
        fe = cls(arch, pretrained=False, **kw)
        fe.ready = False
        return fe

    def load_state_dict(self, state_dict, strict: bool = True, assign: bool = False):
        out = super().load_state_dict(state_dict, strict=strict, assign=assign)
        self.ready = True
        return out

    def set_trainable(self, levels: Iterable[int]) -> None:
        levels = set(levels)
        bad = levels - set(LEVELS)
        if bad:
            raise ValueError(f"unknown levels {sorted(bad)}")
        self.trainable_levels = levels
        for level, stage in zip(LEVELS, self.stages):
            for p in stage.parameters():
                p.requires_grad_(level in levels)

    def train(self, mode: bool = True):
        super().train(mode)
        # running statistics stay fixed during fine-tuning; affine params still learn
        if self.freeze_batchnorm:
            for m in self.modules():
                if isinstance(m, nn.modules.batchnorm._BatchNorm):
                    m.eval()
        return self

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        if not self.ready:
            raise BackboneStateError("feature extractor weights are not initialized")
        h = (x - self.mean) / self.std
        layers = {}
        for level, stage in zip(LEVELS, self.stages):
            h = stage(h)
            layers[level] = h
        return FeaturePyramid(layers, tuple(x.shape[-2:]))

    def extract_pyramid(self, x: torch.Tensor) -> FeaturePyramid:
        return self(x)


def pooled_views(pyramid: FeaturePyramid, levels: Iterable[int]) -> List[torch.Tensor]:
    """Global average pool of each requested level, one (B, C) tensor per level."""
    levels = sorted(set(levels))
    if not levels:
        raise ValueError("at least one level is required")
    for l in levels:
        if l not in pyramid.layers:
            raise ValueError(f"level {l} not in pyramid")
    return [F.adaptive_avg_pool2d(pyramid[l], 1).flatten(1) for l in levels]


def patch_embeddings(pyramid: FeaturePyramid, levels: Sequence[int] = (2, 3),
                     neighborhood: int = 3) -> torch.Tensor:
    """Locally aggregated patch features on the grid of the shallowest level.

    Returns a (B, h, w, d) tensor with d the summed channel count.
    """
    if neighborhood < 1 or neighborhood % 2 == 0:
        raise ValueError("neighborhood must be odd and >= 1")
    levels = sorted(levels)
    ref = pyramid[levels[0]]
    size = ref.shape[-2:]
    maps = [ref]
    for l in levels[1:]:
        maps.append(F.interpolate(pyramid[l], size=size, mode="bilinear", align_corners=False))
    feats = torch.cat(maps, dim=1)
    if neighborhood > 1:
        feats = F.avg_pool2d(feats, neighborhood, stride=1, padding=neighborhood // 2,
                             count_include_pad=False)
    return feats.permute(0, 2, 3, 1).contiguous()


def aggregate_patches(pyramid: FeaturePyramid, levels: Sequence[int] = (2, 3),
                      neighborhood: int = 3,
                      provenance: Sequence[str] = ()) -> List[PatchFeatureSet]:
    emb = patch_embeddings(pyramid, levels, neighborhood)
    B, h, w, d = emb.shape
    names = list(provenance) or [""] * B
    return [PatchFeatureSet(emb[i].reshape(h * w, d), (h, w), names[i]) for i in range(B)]


# -- checkpoints --------------------------------------------------------------------

def state_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, modules: Dict[str, nn.Module], manifest: Dict) -> Path:
    """Serialize module weights to ``path`` plus a ``<path>.json`` sidecar manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({k: m.state_dict() for k, m in modules.items()}, path)
    meta = dict(manifest)
    meta["checksums"] = {k: state_checksum(m) for k, m in modules.items()}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path, modules: Dict[str, nn.Module]) -> Dict:
    path = Path(path)
    if not path.exists():
        raise BackboneStateError(f"checkpoint {path} not found")
    state = torch.load(path, map_location="cpu", weights_only=True)
    for k, m in modules.items():
        if k not in state:
            raise BackboneStateError(f"checkpoint {path} has no entry {k!r}")
        m.load_state_dict(state[k])
    return read_checkpoint_manifest(path)


def read_checkpoint_manifest(path) -> Dict:
    side = Path(str(path) + ".json")
    return json.loads(side.read_text()) if side.exists() else {}
