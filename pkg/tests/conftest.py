import csv
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from tiger_triage.model import BackboneSpec, build


def striped_image(rng: np.random.Generator, tiger: bool, size: int = 32) -> np.ndarray:
    """H x W x 3 uint8; the positive class carries white horizontal bands."""
    img = 0.3 * rng.random((size, size, 3))
    if tiger:
        off = int(rng.integers(0, 8))
        img[off::8, :, :] += 0.7
    else:
        img += 0.35
    return (np.clip(img, 0, 1) * 255).astype(np.uint8)


def write_corpus(root: Path, rows, size: int = 32, seed: int = 0) -> Path:
    """rows: iterable of (id, species, confidence). Returns the manifest path."""
    rng = np.random.default_rng(seed)
    images = root / "images"
    images.mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "relative_path", "species", "confidence"])
        for rid, species, confidence in rows:
            rel = f"{rid}.png"
            Image.fromarray(striped_image(rng, species == "albopictus", size)).save(images / rel)
            w.writerow([rid, rel, species, confidence])
    return manifest


def corpus_rows(n_tiger: int, n_non: int, n_unclassified: int = 0):
    rows = [(f"t{i:03d}", "albopictus", "confirmed") for i in range(n_tiger)]
    rows += [(f"n{i:03d}", "aegypti" if i % 2 else "other", "confirmed") for i in range(n_non)]
    rows += [(f"u{i:03d}", "albopictus", "not_classified") for i in range(n_unclassified)]
    return rows


@pytest.fixture
def corpus(tmp_path):
    manifest = write_corpus(tmp_path, corpus_rows(12, 12, 4))
    return manifest, tmp_path / "images"


@pytest.fixture
def tiny_net():
    return build(BackboneSpec("tinycnn", pretrained=False), seed=0, input_size=(32, 32))


@pytest.fixture(scope="session")
def vgg_random():
    net = build(BackboneSpec("vgg16", pretrained=False), seed=0)
    return net.eval()


@pytest.fixture
def rand_image():
    g = torch.Generator().manual_seed(7)
    return torch.randn(1, 3, 32, 32, generator=g)
