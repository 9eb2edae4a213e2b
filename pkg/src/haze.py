# haze.py - Synthetic haze from the atmospheric scattering model
'''
hazy = clean * t + A * (1 - t), with transmission t = exp(-beta * depth) and
depth normalized to [0, 1]. Depth maps come in three kinds:

  constant  one depth value everywhere
  ramp      linear left-to-right (direction drawn from the rng)
  radial    a bump, deepest at a random center, falling off to the corners

Clean scenes for desk-scale datasets are generated here too, so nothing has
to be downloaded to train or test.
'''

import math
import os
import sys

import numpy as np
from scipy.special import expit

sys.path.insert(0, os.path.dirname(__file__))
from pairs import ImagePair, Provenance
from utils import logger

DEPTH_KINDS = ("constant", "ramp", "radial")
PRESETS = {"thin": (0.5, 1.0), "moderate": (1.0, 2.0), "thick": (2.0, 4.0)}
PRESET_ORDER = ("thin", "moderate", "thick")
A_RANGE = (0.7, 1.0)


class HazeParameterError(ValueError):
    pass


def depth_map(kind, h, w, rng=None, value=1.0):
    if kind == "constant":
        if not 0.0 <= value <= 1.0:
            raise HazeParameterError(f"constant depth must lie in [0, 1], got {value}")
        return np.full((h, w), float(value))
    rng = rng if rng is not None else np.random.default_rng(0)
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")
    if kind == "ramp":
        return xx if rng.random() < 0.5 else 1.0 - xx
    if kind == "radial":
        cy, cx = rng.uniform(0.25, 0.75, size=2)
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        return 1.0 - r / r.max() if r.max() > 0 else np.ones((h, w))
    raise HazeParameterError(f"unknown depth kind {kind!r}; expected one of {DEPTH_KINDS}")


def transmission(depth, beta):
    return np.exp(-beta * depth)


def synthesize_haze(clean, beta, A, depth_kind="constant", rng=None, depth_value=1.0,
                    pair_id="synthetic", preset=""):
    if not beta >= 0:
        raise HazeParameterError(f"beta must be non-negative, got {beta}")
    if not A_RANGE[0] <= A <= A_RANGE[1]:
        raise HazeParameterError(f"atmospheric light A must lie in {list(A_RANGE)}, got {A}")
    clean = np.clip(np.asarray(clean, dtype=np.float64), 0.0, 1.0)
    _, h, w = clean.shape

    t = transmission(depth_map(depth_kind, h, w, rng, depth_value), beta)[None]
    hazy = np.clip(clean * t + A * (1.0 - t), 0.0, 1.0)
    provenance = Provenance.synthetic(beta, A, depth_kind, preset)
    return ImagePair(pair_id, hazy, clean, provenance)


def make_clean_scene(h, w, rng, waves=3, blocks=2):
    '''Smooth random RGB field: a few low-frequency sinusoids plus soft-edged blocks.'''
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")
    scene = np.empty((3, h, w))
    for channel in range(3):
        field = np.full((h, w), rng.uniform(0.2, 0.6))
        for _ in range(waves):
            fy, fx = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            field += rng.uniform(0.05, 0.2) * np.sin(2.0 * math.pi * (fy * yy + fx * xx) + phase)
        scene[channel] = field

    edge = 0.02
    for _ in range(blocks):
        y0, x0 = rng.uniform(0.0, 0.7, size=2)
        side = rng.uniform(0.15, 0.3)
        mask = (expit((yy - y0) / edge) * expit((y0 + side - yy) / edge)
                * expit((xx - x0) / edge) * expit((x0 + side - xx) / edge))
        scene += rng.uniform(-0.25, 0.25, size=(3, 1, 1)) * mask
    return np.clip(scene, 0.0, 1.0)


def generate_pairs(count, size=(64, 64), seed=0, presets=PRESET_ORDER, depth_kinds=DEPTH_KINDS):
    rng = np.random.default_rng(seed)
    h, w = size
    pairs = []
    for i in range(count):
        preset = presets[i % len(presets)]
        kind = depth_kinds[i % len(depth_kinds)]
        beta = rng.uniform(*PRESETS[preset])
        A = rng.uniform(*A_RANGE)
        depth_value = rng.uniform(0.3, 1.0)
        clean = make_clean_scene(h, w, rng)
        pairs.append(synthesize_haze(clean, beta, A, kind, rng, depth_value, f"syn{i:04d}", preset))
    logger.info(f"✅ Generated {count} synthetic pairs at {h}x{w} (seed={seed})")
    return pairs
