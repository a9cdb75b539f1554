import os
from pathlib import Path

import numpy as np
import pytest

from tocoad.data import (ConfigError, DatasetIntegrityError, DatasetLayoutError, ImageSample,
                         convert_btad, convert_visa, load_category, preprocess, read_manifest,
                         split_checksum, write_manifest)

from conftest import save_png


def test_train_split_all_normal(mvtec_tree):
    split = load_category(mvtec_tree, "widget", "train")
    assert len(split) == 3
    assert list(split.labels) == [0, 0, 0]


def test_test_split_labels_and_masks(mvtec_tree):
    split = load_category(mvtec_tree, "widget", "test")
    assert len(split) == 3
    # "crack" sorts before "good"
    assert sorted(split.labels.tolist()) == [0, 0, 1]
    for s in split:
        assert s.mask is not None and s.mask.shape == s.pixels.shape[:2]
        if s.label == 1:
            assert s.mask.any()
            assert s.mask.sum() == 100
        else:
            assert not s.mask.any()


def test_order_and_pixels_deterministic(mvtec_tree):
    a = load_category(mvtec_tree, "widget", "test")
    b = load_category(mvtec_tree, "widget", "test")
    assert [s.path for s in a] == [s.path for s in b] == sorted(s.path for s in a)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.pixels, y.pixels)
    assert split_checksum(a) == split_checksum(b)


def test_pixels_in_unit_range_and_immutable(mvtec_tree):
    s = load_category(mvtec_tree, "widget", "train")[0]
    assert s.pixels.min() >= 0 and s.pixels.max() <= 1
    with pytest.raises(ValueError):
        s.pixels[0, 0, 0] = 0.5


def test_missing_directory(tmp_path):
    with pytest.raises(DatasetLayoutError):
        load_category(tmp_path, "nothing", "train")


def test_mask_count_mismatch(mvtec_tree):
    save_png(mvtec_tree / "widget" / "test" / "crack" / "001.png", np.zeros((40, 48, 3)))
    with pytest.raises(DatasetIntegrityError):
        load_category(mvtec_tree, "widget", "test")


def test_train_split_rejects_anomalies():
    from tocoad.data import DatasetSplit
    s = ImageSample(np.zeros((4, 4, 3), np.float32), 1, np.ones((4, 4), np.uint8))
    with pytest.raises(DatasetIntegrityError):
        DatasetSplit([s], "train", "c")


def test_preprocess_resize_crop():
    s = ImageSample(np.random.default_rng(0).random((900, 900, 3)).astype(np.float32))
    out = preprocess(s, 256, 224)
    assert out.pixels.shape == (224, 224, 3)


def test_preprocess_identity_crop():
    s = ImageSample(np.random.default_rng(0).random((300, 300, 3)).astype(np.float32))
    out = preprocess(s, 224, 224)
    assert out.pixels.shape == (224, 224, 3)


def test_preprocess_mask_stays_binary(rng):
    mask = (rng.random((97, 131)) > 0.7).astype(np.uint8)
    s = ImageSample(rng.random((97, 131, 3)).astype(np.float32), 1, mask)
    out = preprocess(s, 80, 64)
    assert set(np.unique(out.mask)) <= {0, 1}
    assert out.mask.shape == (64, 64)


def test_preprocess_idempotent(rng):
    s = ImageSample(rng.random((90, 90, 3)).astype(np.float32), 1,
                    (rng.random((90, 90)) > 0.5).astype(np.uint8))
    once = preprocess(s, 72, 64)
    twice = preprocess(once, 72, 64)
    np.testing.assert_array_equal(once.pixels, twice.pixels)
    np.testing.assert_array_equal(once.mask, twice.mask)


def test_preprocess_crop_larger_than_resize(rng):
    with pytest.raises(ConfigError):
        preprocess(ImageSample(rng.random((8, 8, 3)).astype(np.float32)), 32, 64)


def test_manifest_roundtrip(tmp_path):
    write_manifest(tmp_path / "m.txt", {"seed": 3, "config_hash": "abc", "root": "/x/y"})
    assert read_manifest(tmp_path / "m.txt") == {"seed": "3", "config_hash": "abc", "root": "/x/y"}


def test_convert_btad(tmp_path, rng):
    src = tmp_path / "btad" / "01"
    save_png(src / "train" / "ok" / "0000.png", rng.random((16, 16, 3)))
    save_png(src / "test" / "ok" / "0001.png", rng.random((16, 16, 3)))
    save_png(src / "test" / "ko" / "0002.png", rng.random((16, 16, 3)))
    m = np.zeros((16, 16))
    m[2:5, 2:5] = 1
    save_png(src / "ground_truth" / "ko" / "0002.png", m)
    convert_btad(tmp_path / "btad", tmp_path / "mv", "01")
    test = load_category(tmp_path / "mv", "01", "test")
    assert sorted(test.labels.tolist()) == [0, 1]
    assert len(load_category(tmp_path / "mv", "01", "train")) == 1


def test_convert_visa(tmp_path, rng):
    src = tmp_path / "visa"
    save_png(src / "candle" / "Data" / "Images" / "Normal" / "000.png", rng.random((16, 16, 3)))
    save_png(src / "candle" / "Data" / "Images" / "Normal" / "001.png", rng.random((16, 16, 3)))
    save_png(src / "candle" / "Data" / "Images" / "Anomaly" / "100.png", rng.random((16, 16, 3)))
    from PIL import Image
    mdir = src / "candle" / "Data" / "Masks" / "Anomaly"
    mdir.mkdir(parents=True)
    m = np.zeros((16, 16), np.uint8)
    m[3:6, 3:6] = 1  # label value, not 255
    Image.fromarray(m).save(mdir / "100.png")
    (src / "split_csv").mkdir()
    (src / "split_csv" / "1cls.csv").write_text(
        "object,split,label,image,mask\n"
        "candle,train,normal,candle/Data/Images/Normal/000.png,\n"
        "candle,test,normal,candle/Data/Images/Normal/001.png,\n"
        "candle,test,anomaly,candle/Data/Images/Anomaly/100.png,candle/Data/Masks/Anomaly/100.png\n"
    )
    convert_visa(src, tmp_path / "mv", "candle")
    test = load_category(tmp_path / "mv", "candle", "test")
    bad = [s for s in test if s.label == 1]
    assert len(bad) == 1 and bad[0].mask.sum() == 9


@pytest.mark.skipif("MVTEC_ROOT" not in os.environ, reason="MVTec AD not available")
def test_mvtec_bottle_train_count():
    # 209 defect-free training images in the public release
    assert len(load_category(os.environ["MVTEC_ROOT"], "bottle", "train")) == 209
