import math
import time

import numpy as np
import pytest
import torch

from tocoad.backbone import FeatureExtractor, FeaturePyramid, state_checksum
from tocoad.data import ConfigError, load_category, load_textures, preprocess_split
from tocoad.discriminative import (Decoder, FocalParams, PredictedMask, Stage1Config, cross_entropy_loss,
                                   focal_loss, train_stage1)
from tocoad.fixture import CATEGORY, make_fixture
from tocoad.synthesis import GeneratorConfig


def focal_reference(logits, target, alpha, gamma):
    """Element-by-element focal loss; logits (2, H, W) float64 ndarray."""
    _, h, w = logits.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            a, b = logits[0, y, x], logits[1, y, x]
            m = max(a, b)
            p1 = math.exp(b - m) / (math.exp(a - m) + math.exp(b - m))
            t = target[y, x]
            pt = max(p1 if t == 1 else 1.0 - p1, 1e-7)
            at = 1.0 if alpha is None else (alpha if t == 1 else 1.0 - alpha)
            total += -at * (1.0 - pt) ** gamma * math.log(pt)
    return total / (h * w)


def test_focal_matches_scalar_reference():
    rs = np.random.default_rng(0)
    start = time.perf_counter()
    for _ in range(100):
        logits = rs.normal(scale=3.0, size=(2, 8, 8))
        target = (rs.random((8, 8)) > 0.6).astype(np.int64)
        alpha, gamma = rs.uniform(0.05, 0.95), rs.uniform(0, 4)
        got = focal_loss(torch.from_numpy(logits)[None], torch.from_numpy(target)[None], alpha, gamma)
        assert got.item() == pytest.approx(focal_reference(logits, target, alpha, gamma), abs=1e-6)
    assert time.perf_counter() - start < 5.0


def test_focal_reduces_to_cross_entropy():
    rs = np.random.default_rng(1)
    logits = torch.from_numpy(rs.normal(size=(3, 2, 8, 8)))
    target = torch.from_numpy((rs.random((3, 8, 8)) > 0.5).astype(np.int64))
    ref = torch.nn.functional.cross_entropy(logits, target)
    assert focal_loss(logits, target, alpha=None, gamma=0.0).item() == pytest.approx(ref.item(), abs=1e-6)
    assert cross_entropy_loss(logits, target).item() == pytest.approx(ref.item(), abs=1e-6)


def test_focal_perfect_prediction_is_zero():
    target = torch.tensor([[[0, 1], [1, 0]]])
    logits = torch.stack([(1 - target) * 200.0, target * 200.0], 1).double()
    assert focal_loss(logits, target).item() == pytest.approx(0.0, abs=1e-12)


def test_focal_floor_keeps_loss_finite():
    target = torch.ones(1, 2, 2, dtype=torch.long)
    logits = torch.tensor([1e4, -1e4]).view(1, 2, 1, 1).expand(1, 2, 2, 2)
    loss = focal_loss(logits, target, 0.75, 0.0)
    assert loss.item() == pytest.approx(-0.75 * math.log(1e-7), rel=1e-6)


def test_focal_permutation_equivariant():
    rs = np.random.default_rng(2)
    logits = torch.from_numpy(rs.normal(size=(1, 2, 6, 6)))
    target = torch.from_numpy((rs.random((1, 6, 6)) > 0.5).astype(np.int64))
    perm = torch.from_numpy(rs.permutation(36))
    lp = logits.flatten(2)[..., perm].view(1, 2, 6, 6)
    tp = target.flatten(1)[..., perm].view(1, 6, 6)
    assert focal_loss(lp, tp).item() == pytest.approx(focal_loss(logits, target).item(), abs=1e-12)


def test_focal_rejects_non_binary_target():
    with pytest.raises(ValueError):
        focal_loss(torch.zeros(1, 2, 2, 2), torch.tensor([[[0, 2], [1, 0]]]))


@pytest.mark.parametrize("kw", [{"alpha_anomalous": 0.0}, {"alpha_anomalous": 1.0}, {"gamma": -1}])
def test_focal_params_validation(kw):
    with pytest.raises(ConfigError):
        FocalParams(**kw)


def test_decoder_output_dims_and_probabilities():
    fe = FeatureExtractor("desk").eval()
    dec = Decoder(fe.channels).eval()
    with torch.no_grad():
        out = dec.decode(fe(torch.rand(2, 3, 64, 64)))
    assert out.logits.shape == (2, 2, 64, 64)
    p = out.probabilities
    assert torch.all((p >= 0) & (p <= 1))
    assert torch.allclose(p.sum(1), torch.ones(2, 64, 64), atol=1e-6)
    assert not torch.allclose(out.logits[0], out.logits[1])


def test_decoder_rejects_incomplete_pyramid():
    dec = Decoder((16, 32, 64, 128))
    with pytest.raises(ValueError):
        dec(FeaturePyramid({4: torch.zeros(1, 128, 2, 2)}, (64, 64)))


@pytest.fixture(scope="module")
def fixture_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("fx")
    tex = make_fixture(root, seed=0, n_train=16, n_test_good=2, n_test_bad=2, n_textures=4)
    train = preprocess_split(load_category(root, CATEGORY, "train"), 64, 64)
    return train, load_textures(tex)


def test_stage1_loss_decreases_and_backbone_frozen(fixture_data):
    train, textures = fixture_data
    fe = FeatureExtractor("desk")
    before = state_checksum(fe)
    gen = GeneratorConfig(texture_source="external", texture_dir="unused")
    res = train_stage1(train, fe, gen, Stage1Config(epochs=5, batch_size=8, lr=1e-3), seed=0,
                       textures=textures)
    assert len(res.epoch_losses) == 5
    assert res.epoch_losses[-1] < res.epoch_losses[0]
    assert state_checksum(fe) == before


def test_stage1_zero_epochs_returns_initialization(fixture_data):
    train, textures = fixture_data
    fe = FeatureExtractor("desk")
    dec = Decoder(fe.channels)
    init = state_checksum(dec)
    gen = GeneratorConfig(texture_source="external", texture_dir="unused")
    res = train_stage1(train, fe, gen, Stage1Config(epochs=0), seed=0, decoder=dec, textures=textures)
    assert res.epoch_losses == [] and state_checksum(res.decoder) == init


def test_stage1_empty_split():
    from tocoad.data import DatasetSplit
    with pytest.raises(ValueError):
        train_stage1(DatasetSplit([], "train", "c"), FeatureExtractor("desk"), GeneratorConfig(),
                     Stage1Config(epochs=1), seed=0)
