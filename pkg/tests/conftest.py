import numpy as np
import pytest
from PIL import Image


@pytest.fixture
def rng():
    return np.random.default_rng(20180718)


def write_gray_png(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path)
    return path


def write_rgb_png(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(path)
    return path


def blob_case(seed, n=64):
    """Elliptical lesion, matching RGB image, and a salt-and-pepper prediction."""
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:n, 0:n]
    cy, cx = rng.uniform(0.35 * n, 0.65 * n, 2)
    ay, ax = rng.uniform(0.15 * n, 0.3 * n, 2)
    th = rng.uniform(0, np.pi)
    u = (yy - cy) * np.cos(th) + (xx - cx) * np.sin(th)
    v = -(yy - cy) * np.sin(th) + (xx - cx) * np.cos(th)
    gt = ((u / ay) ** 2 + (v / ax) ** 2 <= 1).astype(np.uint8)
    lesion = rng.integers(40, 140, 3)
    skin = rng.integers(170, 230, 3)
    img = np.where(gt[..., None] == 1, lesion, skin) + rng.normal(0, 8, (n, n, 3))
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    p = ndimage.gaussian_filter(gt.astype(float), 1.0) * 0.8 + 0.1
    noise = rng.random((n, n))
    frac = rng.uniform(0.05, 0.15)
    p = np.where(noise < frac / 2, rng.uniform(0.0, 0.05, (n, n)), p)
    p = np.where(noise > 1 - frac / 2, rng.uniform(0.95, 1.0, (n, n)), p)
    return img, np.clip(p, 0, 1), gt


# one line per acceptance criterion, collected by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
