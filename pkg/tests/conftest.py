import numpy as np
import pytest
import torch
from PIL import Image

from tocoad.data import ImageSample


def save_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(arr)
    if arr.ndim == 2:
        Image.fromarray((arr * 255).astype(np.uint8), mode="L").save(path)
    else:
        Image.fromarray((arr * 255).round().astype(np.uint8)).save(path)


@pytest.fixture
def mvtec_tree(tmp_path):
    """3 train images, test: 2 good + 1 crack with mask."""
    rng = np.random.default_rng(0)
    cat = tmp_path / "widget"
    for i in range(3):
        save_png(cat / "train" / "good" / f"{i:03d}.png", rng.random((40, 48, 3)))
    for i in range(2):
        save_png(cat / "test" / "good" / f"{i:03d}.png", rng.random((40, 48, 3)))
    save_png(cat / "test" / "crack" / "000.png", rng.random((40, 48, 3)))
    mask = np.zeros((40, 48))
    mask[10:20, 5:15] = 1
    save_png(cat / "ground_truth" / "crack" / "000_mask.png", mask)
    return tmp_path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_sample(rng, h=32, w=32, label=0, path="x"):
    return ImageSample(rng.random((h, w, 3)).astype(np.float32), label, None, "c", path)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


_ACCEPTANCE = []


@pytest.fixture
def record():
    """Record one acceptance line: record(number, passed, detail)."""
    def _record(num, passed, detail=""):
        line = f"criterion {num}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        _ACCEPTANCE.append(line)
        print(line)
    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
