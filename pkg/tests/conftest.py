import numpy as np
import pytest
import torch

from surfacenet.dataset import make_training_record
from surfacenet.procedural import PATTERNS, generate_procedural

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_records():
    """Eight 64x64 procedural records cycling through every pattern."""
    return [make_training_record(generate_procedural(s, PATTERNS[s % 5], 64), id=f"rec{s}", category=PATTERNS[s % 5])
            for s in range(8)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
