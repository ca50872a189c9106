import pytest

import scenes


@pytest.fixture(scope="session")
def tiny_model():
    """d = 16 embedding trained for 500 steps on synthetic translations."""
    return scenes.train_tiny(d=16, steps=500, seed=0)
