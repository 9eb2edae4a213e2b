# metrics.py - PSNR, SSIM and MSE on (3, h, w) images in [0, 1]
'''
Evaluation is full-image (no border crop). PSNR is computed per image and
then averaged over a dataset. SSIM is the per-channel windowed index
(11x11 Gaussian window, sigma 1.5, C1 = 0.01**2, C2 = 0.03**2, data range 1)
averaged over RGB.
'''

import math
import os
import sys

import numpy as np
import pandas as pd
from skimage.metrics import structural_similarity

sys.path.insert(0, os.path.dirname(__file__))
from tensor import ShapeError
from utils import logger

SSIM_MIN_SIDE = 11
REPORT_COLUMNS = ["id", "preset", "psnr", "ssim", "mse"]


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(value, peak=1.0):
    if value == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / value)


def psnr(a, b):
    return psnr_from_mse(mse(a, b))


def ssim(a, b):
    a, b = _pair(a, b)
    if a.ndim != 3:
        raise ShapeError(f"ssim expects (c, h, w) images, got {a.shape}")
    if min(a.shape[1:]) < SSIM_MIN_SIDE:
        raise ShapeError(f"ssim needs h, w >= {SSIM_MIN_SIDE}, got {a.shape[1]}x{a.shape[2]}")
    return float(structural_similarity(a, b, data_range=1.0, channel_axis=0, gaussian_weights=True,
                                       sigma=1.5, use_sample_covariance=False))


def format_report_line(image_id, psnr_db, ssim_value, mse_value):
    return f"{image_id} {psnr_db:.4f} {ssim_value:.6f} {mse_value:.6e}"


def parse_report_line(line):
    image_id, psnr_db, ssim_value, mse_value = line.split()
    return {"id": image_id, "psnr": float(psnr_db), "ssim": float(ssim_value), "mse": float(mse_value)}


def evaluate_pairs(pairs, restore=None):
    '''
    Score restore(pair.hazy) against pair.clean for every pair. Without a
    restore function the hazy image itself is scored.

    Returns (per_image, summary). The summary always has a "mean" row; when
    the pairs carry haze presets it also has one row per preset and an
    "average" row holding the mean of the preset means.
    '''
    rows = []
    for pair in pairs:
        output = pair.hazy if restore is None else restore(pair.hazy)
        error = mse(output, pair.clean)
        rows.append({"id": pair.id, "preset": pair.provenance.preset or "",
                     "psnr": psnr_from_mse(error), "ssim": ssim(output, pair.clean), "mse": error})
    per_image = pd.DataFrame(rows, columns=REPORT_COLUMNS)

    metrics = ["psnr", "ssim", "mse"]
    summary = [dict(group="mean", **per_image[metrics].mean().to_dict())]
    presets = per_image.loc[per_image["preset"] != "", "preset"].unique()
    if len(presets):
        by_preset = per_image[per_image["preset"] != ""].groupby("preset", sort=False)[metrics].mean()
        for preset, values in by_preset.iterrows():
            summary.append(dict(group=preset, **values.to_dict()))
        summary.append(dict(group="average", **by_preset.mean().to_dict()))

    logger.info(f"✅ Evaluated {len(per_image)} pairs: mean PSNR {summary[0]['psnr']:.4f} dB")
    return per_image, pd.DataFrame(summary, columns=["group"] + metrics)
