# train.py - Loss, Adam, cosine schedule, augmentation and the training loop
'''
fit() runs the protocol: each epoch draws one random square patch per
training image, applies the same random flip/rotation to both halves of the
pair, and takes Adam steps on the L1 loss (optionally plus an SSIM term)
with a cosine-annealed learning rate. Every optimizer step produces a log
record (epoch, step, lr, loss, val_psnr) that is passed to the callbacks and
returned as a DataFrame at the end.
'''

import math
import os
import sys
from dataclasses import replace

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(__file__))
import autograd as ag
from autograd import Tape, TapeError
from checkpoint import save_checkpoint
from config import NetConfig, TrainConfig
from haze import generate_pairs
from metrics import psnr
from network import build, forward, predict
from pairs import DatasetError
from tensor import ConvSpec, ShapeError
from utils import banner, logger

LOG_COLUMNS = ["epoch", "step", "lr", "loss", "val_psnr"]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class NonFiniteLossError(RuntimeError):
    pass


# Function 01
def l1_loss(pred, target):
    target = ag.lift(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    return ag.mean(ag.absolute(ag.sub(pred, target)))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    offsets = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


# Function 02
def ssim_index(pred, target):
    '''Mean SSIM over valid 11x11 Gaussian windows, differentiable in pred.'''
    target = ag.lift(target)
    n, c, h, w = pred.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} inputs, got {h}x{w}")
    spec = ConvSpec(c, c, kernel=SSIM_WINDOW, groups=c, bias=False)
    window = np.broadcast_to(gaussian_window(), spec.weight_shape).astype(pred.value.dtype)
    kernel = ag.lift(window)

    def blur(x):
        return ag.conv2d(x, kernel, None, spec)

    mu_x, mu_y = blur(pred), blur(target)
    mu_xx, mu_yy, mu_xy = ag.mul(mu_x, mu_x), ag.mul(mu_y, mu_y), ag.mul(mu_x, mu_y)
    var_x = ag.sub(blur(ag.mul(pred, pred)), mu_xx)
    var_y = ag.sub(blur(ag.mul(target, target)), mu_yy)
    cov = ag.sub(blur(ag.mul(pred, target)), mu_xy)

    numerator = ag.mul(ag.add(ag.mul(mu_xy, 2.0), SSIM_C1), ag.add(ag.mul(cov, 2.0), SSIM_C2))
    denominator = ag.mul(ag.add(ag.add(mu_xx, mu_yy), SSIM_C1), ag.add(ag.add(var_x, var_y), SSIM_C2))
    return ag.mean(ag.div(numerator, denominator))


def training_loss(pred, target, ssim_weight=0.0):
    loss = l1_loss(pred, target)
    if ssim_weight:
        loss = ag.add(loss, ag.mul(ag.sub(1.0, ssim_index(pred, target)), ssim_weight))
    return loss


# Function 03
def adam_step(store, lr, t, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    if not store.populated:
        raise TapeError("adam_step needs gradients; run backward first")
    if t < 1:
        raise ValueError(f"Adam step index starts at 1, got {t}")
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for _, p in store.items():
        g = p.grad if not weight_decay else p.grad + weight_decay * p.value
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        p.value -= lr * (p.m / correction1) / (np.sqrt(p.v / correction2) + eps)
    store.populated = False


def clip_grad_norm(store, max_norm):
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for _, p in store.items()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for _, p in store.items():
            p.grad *= scale
    return total


# Function 04
def cosine_lr(t, total, lr_max=2e-4, lr_min=1e-8):
    if total <= 0:
        raise ValueError("cosine_lr needs a positive number of epochs")
    if not 0 <= t <= total:
        raise ValueError(f"epoch {t} outside [0, {total}]")
    half = 0.5 * (1.0 + math.cos(math.pi * t / total))
    span = lr_max - lr_min
    # anchor each half at its own endpoint so both ends come out exact
    if half >= 0.5:
        return lr_max - span * (1.0 - half)
    return lr_min + span * half


# Function 05
def apply_transform(pair, flip=False, k=0):
    def move(img):
        if flip:
            img = img[:, :, ::-1]
        return np.ascontiguousarray(np.rot90(img, k, axes=(1, 2)))

    return replace(pair, hazy=move(pair.hazy), clean=move(pair.clean))


def augment(pair, rng, flip=True, rotate=True):
    do_flip = bool(rng.random() < 0.5) if flip else False
    k = int(rng.integers(4)) if rotate else 0
    return apply_transform(pair, do_flip, k)


def random_crop(pair, size, rng):
    _, h, w = pair.hazy.shape
    if size > h or size > w:
        raise ShapeError(f"patch {size} larger than image {h}x{w} ({pair.id})")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    window = (slice(None), slice(top, top + size), slice(left, left + size))
    return replace(pair, hazy=pair.hazy[window], clean=pair.clean[window])


def patch_size(requested, pairs, multiple):
    smallest = min(min(p.hazy.shape[1:]) for p in pairs)
    size = min(requested, smallest)
    size -= size % multiple
    if size < multiple:
        raise ShapeError(f"images of {smallest}px cannot hold a patch divisible by {multiple}")
    if size < requested:
        logger.warning(f"Patch size reduced from {requested} to {size} to fit the smallest image")
    return size


def _split(dataset, name):
    if hasattr(dataset, "pairs"):
        return dataset.pairs(name)
    return list(dataset) if name == "train" else []


def validation_psnr(net, pairs):
    scores = [psnr(predict(net, p.hazy), p.clean) for p in pairs]
    return float(np.mean(scores))


def format_log_line(record):
    line = (f"epoch={record['epoch']} step={record['step']} "
            f"lr={record['lr']:.6e} loss={record['loss']:.6f}")
    if record.get("val_psnr") is not None and not np.isnan(record["val_psnr"]):
        line += f" val_psnr={record['val_psnr']:.4f}"
    return line


def _checkpoint(net, directory, name):
    path = os.path.join(directory, name)
    save_checkpoint(path, net.cfg, net.store)
    return path


# Function 06
def fit(net, dataset, cfg, callbacks=()):
    train_pairs = _split(dataset, "train")
    if not train_pairs:
        raise DatasetError("fit needs a non-empty training split")
    val_pairs = _split(dataset, "val")

    banner(f"TRAINING {cfg.epochs} epochs on {len(train_pairs)} pairs")
    rng = np.random.default_rng(cfg.seed)
    size = patch_size(cfg.patch, train_pairs, net.multiple)
    dtype = net.store.dtype
    records, step = [], 0

    for epoch in range(1, cfg.epochs + 1):
        lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr_max, cfg.lr_min)
        order = rng.permutation(len(train_pairs))
        epoch_records = []

        for start in range(0, len(order), cfg.batch_size):
            batch = []
            for index in order[start:start + cfg.batch_size]:
                pair = random_crop(train_pairs[index], size, rng)
                batch.append(augment(pair, rng, cfg.augment_flip, cfg.augment_rotate))
            hazy = np.stack([p.hazy for p in batch]).astype(dtype)
            clean = np.stack([p.clean for p in batch]).astype(dtype)

            tape = Tape()
            pred = forward(net, tape.constant(hazy))
            loss = training_loss(pred, clean, cfg.ssim_weight)
            value = float(loss.value)
            if not math.isfinite(value):
                raise NonFiniteLossError(f"loss became {value} at epoch {epoch}, step {step + 1}, lr {lr:.3e}")
            tape.backward(loss)
            if cfg.clip_norm:
                clip_grad_norm(net.store, cfg.clip_norm)
            step += 1
            adam_step(net.store, lr, step, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
            epoch_records.append({"epoch": epoch, "step": step, "lr": lr, "loss": value, "val_psnr": float("nan")})

        if cfg.val_every and val_pairs and epoch % cfg.val_every == 0:
            epoch_records[-1]["val_psnr"] = validation_psnr(net, val_pairs)

        for record in epoch_records:
            for callback in callbacks:
                callback(record)
        records.extend(epoch_records)

        mean_loss = np.mean([r["loss"] for r in epoch_records])
        logger.info(f"epoch {epoch}/{cfg.epochs} lr={lr:.3e} loss={mean_loss:.6f}")
        if cfg.checkpoint_every and cfg.checkpoint_dir and epoch % cfg.checkpoint_every == 0:
            _checkpoint(net, cfg.checkpoint_dir, f"epoch{epoch:04d}.rshz")

    if cfg.checkpoint_dir:
        path = _checkpoint(net, cfg.checkpoint_dir, "final.rshz")
        logger.info(f"✅ Saved final checkpoint {path}")
    return pd.DataFrame(records, columns=LOG_COLUMNS)


def overfit_check(seed=0, steps=500, count=4, size=32, net_cfg=None, lr_max=4e-3, lr_min=None):
    '''
    Train a tiny network on `count` fixed synthetic pairs (one full-batch step
    per epoch, no augmentation) and report how far the loss fell.

    The cosine floor defaults to lr_max / 40.
    '''
    if steps < 1:
        raise ValueError(f"overfit_check needs at least one step, got {steps}")
    net_cfg = net_cfg or NetConfig(base_channels=8, depths=(1, 1, 1))
    lr_min = lr_max / 40 if lr_min is None else lr_min
    pairs = generate_pairs(count, (size, size), seed)
    _, net = build(net_cfg, seed)
    cfg = TrainConfig(epochs=steps, patch=size, batch_size=count, lr_max=lr_max, lr_min=lr_min, seed=seed,
                      augment_flip=False, augment_rotate=False)
    history = fit(net, pairs, cfg)
    losses = [float(v) for v in history["loss"]]
    initial, final = losses[0], losses[-1]
    return {"seed": seed, "steps": len(history), "initial_loss": initial, "final_loss": final,
            "ratio": final / initial if initial else math.nan, "psnr": validation_psnr(net, pairs),
            "losses": losses}
