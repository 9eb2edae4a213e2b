# pairs.py - The hazy/clean image pair every reader and generator produces

import math
import os
import sys
from dataclasses import dataclass

import numpy as np

sys.path.insert(0, os.path.dirname(__file__))
from tensor import ShapeError


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Provenance:
    kind: str = "file"        # "file" or "synthetic"
    source: str = ""
    preset: str = ""
    beta: float = math.nan
    A: float = math.nan
    depth_kind: str = ""

    @classmethod
    def from_file(cls, path):
        return cls("file", source=str(path))

    @classmethod
    def synthetic(cls, beta, A, depth_kind, preset=""):
        return cls("synthetic", preset=preset, beta=float(beta), A=float(A), depth_kind=depth_kind)


@dataclass(frozen=True, eq=False)
class ImagePair:
    id: str
    hazy: np.ndarray
    clean: np.ndarray
    provenance: Provenance = Provenance()

    def __post_init__(self):
        hazy = np.asarray(self.hazy)
        clean = np.asarray(self.clean)
        if hazy.ndim != 3 or hazy.shape[0] != 3:
            raise ShapeError(f"{self.id}: images must be (3, h, w), got {hazy.shape}")
        if hazy.shape != clean.shape:
            raise ShapeError(f"{self.id}: hazy {hazy.shape} and clean {clean.shape} differ")
        object.__setattr__(self, "hazy", np.clip(hazy, 0.0, 1.0).astype(np.float32))
        object.__setattr__(self, "clean", np.clip(clean, 0.0, 1.0).astype(np.float32))

    @property
    def shape(self):
        return self.hazy.shape
