import sys
from pathlib import Path

import numpy as np
import pytest

# Add scripts directory to path for imports
SCRIPTS = Path(__file__).resolve().parent.parent / "sumi" / "scripts"
sys.path.insert(0, str(SCRIPTS))

from datagen import TaskSpec, make_task, train_source  # noqa: E402
from model import ModelSpec, MultimodalClassifier, MultimodalSample  # noqa: E402


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    """Keep checkpoint caches out of the user's home directory."""
    monkeypatch.setenv("SUMI_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.delenv("SUMI_THREADS", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return ModelSpec(input_dims=(6, 5), hidden_dim=12, representation_dim=8, num_classes=4)


@pytest.fixture
def small_model(small_spec):
    return MultimodalClassifier.initialize(small_spec, seed=7)


def random_samples(spec: ModelSpec, n: int, seed: int, scale: float = 1.0):
    gen = np.random.default_rng(seed)
    return [
        MultimodalSample(
            gen.normal(0.0, scale, spec.input_dims[0]),
            gen.normal(0.0, scale, spec.input_dims[1]),
            label=int(gen.integers(spec.num_classes)),
            domain="none",
        )
        for _ in range(n)
    ]


@pytest.fixture(scope="session")
def small_task():
    return TaskSpec(num_classes=4, input_dims=(8, 8), n_train=600, n_test=240, seed=3)


@pytest.fixture(scope="session")
def trained_small(small_task):
    """(model, clean accuracy, train, test) on a quick task; no accuracy floor."""
    train, test = make_task(small_task)
    spec = small_task.model_spec(hidden_dim=16, representation_dim=8)
    model, accuracy = train_source(spec, train, epochs=8, lr=3e-3, seed=3, test=test, min_accuracy=None)
    return model, accuracy, train, test
