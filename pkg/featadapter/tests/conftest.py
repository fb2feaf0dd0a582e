from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from featadapter.model import init_checkpoint


@pytest.fixture
def checkpoint(tmp_path):
    path = tmp_path / "backbone.pt"
    init_checkpoint(path, feature_dim=24, width=8, seed=0)
    return path


@pytest.fixture
def images_dir(tmp_path):
    rng = np.random.default_rng(7)
    directory = tmp_path / "images"
    directory.mkdir()
    for name, size in [("alpha", (256, 256)), ("beta", (200, 200))]:
        values = (rng.uniform(0, 255, size)).astype("uint8")
        Image.fromarray(values, mode="L").save(directory / f"{name}.png")
    return directory
