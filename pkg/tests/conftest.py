import numpy as np
import pytest
from PIL import Image

from segstack import load_dataset, synth


def write_pair(root, stem, image, mask):
    """Write one image/mask PNG pair under a dataset root."""
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    img = np.asarray(image)
    if img.ndim == 2:
        Image.fromarray(img.astype(np.uint8), mode="L").save(root / "images" / f"{stem}.png")
    else:
        Image.fromarray(img.astype(np.uint8), mode="RGB").save(root / "images" / f"{stem}.png")
    Image.fromarray(np.asarray(mask).astype(np.uint8), mode="L").save(
        root / "masks" / f"{stem}.png"
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """12 synthetic 32x32 3-class images, shared across structural tests."""
    root = tmp_path_factory.mktemp("tiny") / "data"
    synth.generate_dataset(root, 12, 32, 32, 3, seed=5)
    return load_dataset(root, 3)
