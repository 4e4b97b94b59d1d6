import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ksiam.evaluation import ensure_folds  # noqa: E402
from ksiam.synthetic import SyntheticSpec, generate_synthetic_dataset  # noqa: E402

TINY = SyntheticSpec(n_patients=15, positive_fraction=0.4, slide_size_px=(512, 512), microns_per_pixel=0.25,
                     slides_per_patient=(0.6, 0.3, 0.1), rng_seed=5)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    m = generate_synthetic_dataset(TINY, out)
    ensure_folds(m, 5, 0).write(out / "manifest.csv")
    return out / "manifest.csv"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
