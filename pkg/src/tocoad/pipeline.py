"""Run configuration, the two-stage schedule and artifact lineage.

Artifacts for a run live under one output directory::

    out/config.ini, out/manifest.txt, out/metrics.csv, out/results.txt
    out/<category>/synth/, stage1.pt(.json), stage1_loss.csv,
    out/<category>/stage2.pt(.json), stage2_loss.csv, bank.tcb,
    out/<category>/scores.csv, heatmaps/
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from .backbone import (FeatureExtractor, load_checkpoint, read_checkpoint_manifest,
                       save_checkpoint, state_checksum)
from .contrastive import ContrastiveNet, NclConfig, Stage2Config, train_stage2
from .data import ConfigError, DatasetSplit, load_category, load_textures, preprocess_split
from .discriminative import Decoder, Stage1Config, train_stage1, write_loss_csv
from .memory_bank import (MemoryBank, ScoreMap, ScoringConfig, build_bank, load_bank, save_bank,
                          score_images)
from .metrics import EvalResult, evaluate_maps, results_table, write_results_csv
from .synthesis import AnomalySource, GeneratorConfig

log = logging.getLogger(__name__)

STAGES = ("synth", "stage1", "stage2", "bank", "eval")


@dataclass
class DataConfig:
    root: str = "data/mvtec_ad"
    categories: Tuple[str, ...] = ("bottle",)
    resize: int = 256
    crop: int = 224


@dataclass
class BackboneConfig:
    arch: str = "wide_resnet50_2"
    pretrained: bool = True
    patch_levels: Tuple[int, ...] = (2, 3)
    neighborhood: int = 3


@dataclass
class StagesConfig:
    dnp: bool = True  # discriminative pre-training (stage I)
    ncl: bool = True  # negative-guided contrastive fine-tuning (stage II)


@dataclass
class BankConfig:
    ratio: float = 0.1


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stages: StagesConfig = field(default_factory=StagesConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    ncl: NclConfig = field(default_factory=NclConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)

    def validate(self) -> "RunConfig":
        if self.data.resize < self.data.crop or self.data.crop <= 0:
            raise ConfigError("need resize >= crop > 0")
        if self.data.crop % 32:
            raise ConfigError("crop must be divisible by 32")
        if not self.data.categories:
            raise ConfigError("no categories configured")
        self.generator.validate()
        self.ncl.validate()
        self.scoring.validate()
        if not 0.0 < self.bank.ratio <= 1.0:
            raise ConfigError("bank ratio must lie in (0, 1]")
        return self

    def config_hash(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:16]


# -- INI (de)serialization -----------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _flatten(obj, prefix="") -> Dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = _fmt(v)
    return out


def dump_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser()
    cp["run"] = {"seed": str(cfg.seed)}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            cp[f.name] = _flatten(v)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _parse_scalar(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if like is None:
        if text == "":
            return None
        for cast in (int, float):
            try:
                return cast(text)
            except ValueError:
                pass
    return text


def _parse(text: str, default):
    if isinstance(default, tuple):
        items = [t for t in (x.strip() for x in text.split(",")) if t]
        like = default[0] if default else ""
        return tuple(_parse_scalar(t, like) for t in items)
    return _parse_scalar(text, default)


def _set(obj, dotted: str, text: str) -> None:
    head, _, rest = dotted.partition(".")
    if not any(f.name == head for f in dataclasses.fields(obj)):
        raise ConfigError(f"unknown config key {dotted!r}")
    cur = getattr(obj, head)
    if rest:
        if not dataclasses.is_dataclass(cur):
            raise ConfigError(f"unknown config key {dotted!r}")
        _set(cur, rest, text)
    else:
        if dataclasses.is_dataclass(cur):
            raise ConfigError(f"{dotted!r} is a section, not a key")
        setattr(obj, head, _parse(text, cur))


def apply_overrides(cfg: RunConfig, overrides: Dict[str, str]) -> RunConfig:
    """``overrides`` maps ``section.key`` (``run.seed`` or ``seed`` for the seed) to text."""
    for key, text in overrides.items():
        if key in ("seed", "run.seed"):
            cfg.seed = int(text)
        else:
            _set(cfg, key, text)
    return cfg


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read config {path}")
    cfg = base or RunConfig()
    overrides = {}
    for section in cp.sections():
        for key, value in cp[section].items():
            overrides[f"{section}.{key}"] = value
    return apply_overrides(cfg, overrides)


def desk_config(root, textures: Optional[str] = None, seed: int = 0) -> RunConfig:
    """Small CPU configuration for the procedural fixture (see :mod:`tocoad.fixture`).

    The 64 px fixture images are upsampled to 128 so the level-2 patch grid is
    16x16 rather than 8x8.
    """
    cfg = RunConfig(seed=seed)
    cfg.data = DataConfig(str(root), ("stripes",), 128, 128)
    cfg.backbone = BackboneConfig("desk", False, (2, 3), 3)
    if textures:
        cfg.generator.texture_source = "external"
        cfg.generator.texture_dir = str(textures)
    cfg.stage1 = Stage1Config(epochs=5, batch_size=8, lr=1e-3)
    cfg.stage2 = Stage2Config(epochs=5, batch_size=8, lr=0.01)
    cfg.ncl.proj_dim = 128
    cfg.ncl.pred_hidden = 32
    cfg.scoring = ScoringConfig(b=9, smoothing_sigma=2.0)
    return cfg


# -- stage functions -----------------------------------------------------------------

class Run:
    """Stage runner bound to one config and output directory."""

    def __init__(self, cfg: RunConfig, out_dir, resume: bool = True):
        self.cfg = cfg.validate()
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.resume = resume
        self.hash = cfg.config_hash()
        self._splits: Dict[Tuple[str, str], DatasetSplit] = {}
        self._textures = None
        (self.out / "config.ini").write_text(dump_config(cfg))

    # data
    def split(self, category: str, which: str) -> DatasetSplit:
        key = (category, which)
        if key not in self._splits:
            raw = load_category(self.cfg.data.root, category, which)
            self._splits[key] = preprocess_split(raw, self.cfg.data.resize, self.cfg.data.crop)
        return self._splits[key]

    def textures(self):
        g = self.cfg.generator
        if g.texture_source == "external" and self._textures is None:
            self._textures = load_textures(g.texture_dir)
        return self._textures

    def cat_dir(self, category: str) -> Path:
        d = self.out / category
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _fresh(self, path: Path) -> bool:
        if not (self.resume and path.exists()):
            return False
        return read_checkpoint_manifest(path).get("config_hash") == self.hash

    def _manifest(self, stage: str, epoch: int, **extra) -> Dict:
        return {"architecture": self.cfg.backbone.arch, "stage": stage, "epoch": epoch,
                "config_hash": self.hash, "seed": self.cfg.seed, **extra}

    def new_extractor(self) -> FeatureExtractor:
        b = self.cfg.backbone
        return FeatureExtractor(b.arch, pretrained=b.pretrained, seed=self.cfg.seed)

    # stages
    def synth(self, category: str, n: int = 4) -> List[Path]:
        train = self.split(category, "train")
        source = AnomalySource(train, self.cfg.generator, self.textures())
        out = self.cat_dir(category) / "synth"
        paths = []
        for i in range(min(n, len(train))):
            seed = self.cfg.seed * 1000 + i
            a = source.draw(i, seed)
            if not a.mask.any():
                raise RuntimeError(f"empty synthetic mask for {a.source}")
            stem = f"{Path(a.source).stem}_{a.generator}_{seed}"
            paths.append(_save_rgb(out / f"{stem}.png", a.image))
            _save_rgb(out / f"{stem}_mask.png", a.mask.astype(np.float32))
        return paths

    def stage1(self, category: str) -> Optional[Path]:
        path = self.cat_dir(category) / "stage1.pt"
        if not self.cfg.stages.dnp:
            return None
        if self._fresh(path):
            log.info("%s: stage 1 checkpoint present, skipping", category)
            return path
        extractor = self.new_extractor()
        before = state_checksum(extractor)
        res = train_stage1(self.split(category, "train"), extractor, self.cfg.generator,
                           self.cfg.stage1, self.cfg.seed, textures=self.textures())
        if state_checksum(extractor) != before:
            raise RuntimeError("feature extractor changed during stage 1")
        write_loss_csv(self.cat_dir(category) / "stage1_loss.csv", ["epoch", "mean_loss"],
                       list(enumerate(res.epoch_losses)))
        save_checkpoint(path, {"decoder": res.decoder},
                        self._manifest("stage1", self.cfg.stage1.epochs,
                                       extractor=state_checksum(extractor)))
        return path

    def load_decoder(self, category: str) -> Decoder:
        extractor = self.new_extractor()
        decoder = Decoder(extractor.channels)
        load_checkpoint(self.cat_dir(category) / "stage1.pt", {"decoder": decoder})
        return decoder

    def stage2(self, category: str) -> Optional[Path]:
        path = self.cat_dir(category) / "stage2.pt"
        if not self.cfg.stages.ncl:
            return None
        if self._fresh(path):
            log.info("%s: stage 2 checkpoint present, skipping", category)
            return path
        decoder = self.load_decoder(category) if self.cfg.stages.dnp else None
        d_before = state_checksum(decoder) if decoder is not None else None
        extractor = self.new_extractor()
        res = train_stage2(self.split(category, "train"), extractor, decoder, self.cfg.generator,
                           self.cfg.ncl, self.cfg.stage2, self.cfg.seed, textures=self.textures())
        if decoder is not None and state_checksum(decoder) != d_before:
            raise RuntimeError("discriminative network changed during stage 2")
        write_loss_csv(self.cat_dir(category) / "stage2_loss.csv",
                       ["epoch", "L_sym", "L_neg", "L_ncl"], res.epoch_rows)
        save_checkpoint(path, {"extractor": res.extractor, "contrastive": res.net},
                        self._manifest("stage2", self.cfg.stage2.epochs))
        return path

    def extractor(self, category: str) -> FeatureExtractor:
        extractor = self.new_extractor()
        path = self.cat_dir(category) / "stage2.pt"
        if self.cfg.stages.ncl:
            net = ContrastiveNet(extractor.channels, self.cfg.ncl)
            load_checkpoint(path, {"extractor": extractor, "contrastive": net})
        extractor.eval()
        return extractor

    def build_bank(self, category: str) -> Path:
        path = self.cat_dir(category) / "bank.tcb"
        extractor = self.extractor(category)
        fe_hash = state_checksum(extractor)
        if self.resume and path.exists():
            bank = load_bank(path)
            if bank.extractor_hash == f"{self.hash}:{fe_hash}":
                return path
        b = self.cfg.backbone
        bank = build_bank(self.split(category, "train"), extractor, self.cfg.bank.ratio,
                          self.cfg.seed, b.patch_levels, b.neighborhood,
                          f"{self.hash}:{fe_hash}", self.cfg.scoring.b)
        save_bank(path, bank)
        return path

    def infer(self, category: str, heatmaps: bool = False) -> List[ScoreMap]:
        test = self.split(category, "test")
        bank = load_bank(self.cat_dir(category) / "bank.tcb")
        b = self.cfg.backbone
        maps = score_images(test.samples, bank, self.extractor(category), self.cfg.scoring,
                            b.patch_levels, b.neighborhood)
        with open(self.cat_dir(category) / "scores.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "label", "image_score"])
            for s, m in zip(test, maps):
                w.writerow([_relative(s.path, self.cfg.data.root), s.label,
                            f"{m.image_score:.8f}"])
        if heatmaps:
            export_heatmaps(test, maps, self.cat_dir(category) / "heatmaps")
        return maps

    def evaluate(self, category: str, heatmaps: bool = False) -> EvalResult:
        maps = self.infer(category, heatmaps)
        return evaluate_maps(category, self.split(category, "test").samples, maps)


def _relative(path, root) -> str:
    p = Path(path)
    return p.relative_to(root).as_posix() if p.is_relative_to(root) else p.as_posix()


def _save_rgb(path: Path, arr: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    a = np.clip(arr, 0, 1)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    Image.fromarray((a * 255).round().astype(np.uint8)).save(path)
    return path


def heat_rgb(score: np.ndarray) -> np.ndarray:
    """Min-max normalize a score map per image and map it through a jet colormap."""
    from matplotlib import colormaps

    lo, hi = float(score.min()), float(score.max())
    norm = (score - lo) / (hi - lo) if hi > lo else np.zeros_like(score)
    return colormaps["jet"](norm)[..., :3]


def export_heatmaps(test: DatasetSplit, score_maps, out_dir) -> List[Path]:
    """One image per test sample: original | ground truth | heat overlay."""
    out_dir = Path(out_dir)
    paths = []
    for i, (s, m) in enumerate(zip(test, score_maps)):
        gt = s.mask if s.mask is not None else np.zeros(s.pixels.shape[:2])
        gt_rgb = np.repeat(gt.astype(np.float64)[..., None], 3, axis=2)
        overlay = 0.5 * s.pixels + 0.5 * heat_rgb(m.pixel_map)
        panel = np.concatenate([s.pixels, gt_rgb, overlay], axis=1)
        paths.append(_save_rgb(out_dir / f"{i:04d}_{Path(s.path).stem}.png", panel))
    return paths


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    entries: Dict[str, str] = field(default_factory=dict)

    def write(self, path) -> None:
        data_mod.write_manifest(path, {"config_hash": self.config_hash, "seed": self.seed,
                                       **self.entries})

    @classmethod
    def read(cls, path) -> "RunManifest":
        d = data_mod.read_manifest(path)
        return cls(d.pop("config_hash"), int(d.pop("seed")), d)

    def completed(self, category: str) -> List[str]:
        return [s for s in STAGES if self.entries.get(f"stage.{category}.{s}") in ("done", "skipped")]


def run_full(cfg: RunConfig, out_dir, resume: bool = True, heatmaps: bool = False) -> RunManifest:
    """synth check -> stage I -> stage II -> bank -> evaluation, for every category."""
    run = Run(cfg, out_dir, resume)
    torch.use_deterministic_algorithms(True)
    manifest = RunManifest(run.hash, cfg.seed, {"dataset_root": cfg.data.root,
                                                "started": time.strftime("%Y-%m-%dT%H:%M:%S")})
    mpath = run.out / "manifest.txt"
    results = []
    try:
        for cat in cfg.data.categories:
            manifest.entries[f"split.{cat}.train"] = run.split(cat, "train").checksum()
            manifest.entries[f"split.{cat}.test"] = run.split(cat, "test").checksum()
            for stage, fn in (("synth", run.synth), ("stage1", run.stage1),
                              ("stage2", run.stage2), ("bank", run.build_bank)):
                key = f"stage.{cat}.{stage}"
                manifest.entries[key] = "running"
                manifest.write(mpath)
                out = fn(cat)
                manifest.entries[key] = "skipped" if out is None else "done"
                if isinstance(out, Path):
                    manifest.entries[f"artifact.{cat}.{stage}"] = out.relative_to(run.out).as_posix()
            key = f"stage.{cat}.eval"
            manifest.entries[key] = "running"
            results.append(run.evaluate(cat, heatmaps))
            manifest.entries[key] = "done"
        write_results_csv(run.out / "metrics.csv", results)
        (run.out / "results.txt").write_text(results_table(results) + "\n")
        manifest.entries["metrics"] = "metrics.csv"
        manifest.entries["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    except Exception as exc:
        manifest.entries["status"] = f"failed: {type(exc).__name__}: {exc}"
        manifest.write(mpath)
        raise
    manifest.entries["status"] = "complete"
    manifest.write(mpath)
    return manifest
