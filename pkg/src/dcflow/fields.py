"""Flow field container shared by every stage."""

from dataclasses import dataclass

import numpy as np


@dataclass
class FlowField:
    """Per-pixel 2D displacement with a validity mask.

    ``vectors`` has shape (H, W, 2) holding (dx, dy) per pixel, ``valid`` has
    shape (H, W). Vectors at invalid pixels carry no meaning.
    """

    vectors: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.vectors.ndim != 3 or self.vectors.shape[2] != 2:
            raise ValueError(f"flow vectors must be (H, W, 2), got {self.vectors.shape}")
        if self.valid.shape != self.vectors.shape[:2]:
            raise ValueError("validity mask does not match flow shape")

    @property
    def shape(self):
        return self.vectors.shape[:2]

    @classmethod
    def dense(cls, vectors):
        vectors = np.asarray(vectors, dtype=np.float64)
        return cls(vectors, np.ones(vectors.shape[:2], dtype=bool))

    @classmethod
    def constant(cls, shape, flow):
        vectors = np.empty(tuple(shape) + (2,))
        vectors[...] = flow
        return cls.dense(vectors)
