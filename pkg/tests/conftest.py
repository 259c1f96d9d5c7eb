import numpy as np
import pytest
from PIL import Image

from mtpix2pix import data as dp


def write_triple(root, sid, size=16, value=0, mask_labels=None):
    for d in dp.SUBDIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    img = np.full((size, size), value, np.uint8)
    Image.fromarray(img, "L").save(root / "images" / f"{sid}.png")
    labels = np.zeros((size, size), np.uint8) if mask_labels is None else mask_labels
    Image.fromarray(dp.encode_labels(labels), "RGB").save(root / "masks" / f"{sid}.png")
    Image.fromarray(img, "L").save(root / "suppressed" / f"{sid}.png")


@pytest.fixture
def tiny_dataset(tmp_path):
    for i in range(3):
        write_triple(tmp_path, f"s{i}", value=10 * i)
    return tmp_path


def random_sample(rng, size=32, sid="a", subject="a"):
    labels = rng.integers(0, 4, (size, size))
    X = dp.normalize(np.repeat(rng.integers(0, 256, (size, size, 1)), 3, axis=-1))
    Y2 = dp.normalize(np.repeat(rng.integers(0, 256, (size, size, 1)), 3, axis=-1))
    return dp.PairedSample(sid, subject, X, dp.normalize(dp.encode_labels(labels)), Y2)


def toy_samples(n, size=32, seed=0):
    """In-memory synthetic samples (one per subject) built from the toy generator."""
    from mtpix2pix.harness import toy_arrays

    out = []
    for i in range(n):
        x, labels, supp, _ = toy_arrays(size, np.random.default_rng([seed, i]))
        out.append(dp.PairedSample(
            f"t{i}", f"S{i}", dp.normalize(np.repeat(x[..., None], 3, axis=-1)),
            dp.normalize(dp.encode_labels(labels)),
            dp.normalize(np.repeat(supp[..., None], 3, axis=-1))))
    return out


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
