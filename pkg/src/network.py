# network.py - Assemble the dehazing network from blocks and count its cost
'''
Layout for L levels with widths c, 2c, 4c, ...:

  stem     3x3 conv, RGB -> c
  encoder  one stride-2 3x3 conv per level, nothing else
  paths    the learning blocks sit on the skip path of every level and on
           the bottleneck (the coarsest level)
  CMIM     adjacent path pairs, finest pair first
  decoder  per level, coarsest first: 1x1 conv + pixel_shuffle(2) up-sampling,
           then fusion with the skip path (ITFM or a 1x1 conv baseline)
  head     3x3 conv -> 4 channels fed to the soft residual (or 3 channels
           used directly when SRC is off)

Inputs whose height or width is not a multiple of 2**(L-1) are reflect
padded and the output is cropped back.
'''

import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(__file__))
import autograd as ag
import tensor
from autograd import ParamStore, Var
from blocks import (
    ConvLayer,
    build_blocks,
    build_cmim,
    build_conv_fusion,
    build_itfm,
    run_blocks,
    src_apply,
)
from config import ConfigError, NetConfig
from tensor import ConvSpec, ShapeError
from utils import logger

DESCRIBE_COLUMNS = ["name", "kind", "shape", "params", "flops"]


@dataclass(frozen=True)
class Net:
    cfg: NetConfig
    stem: ConvLayer
    downs: tuple
    paths: tuple
    cmims: tuple
    ups: tuple
    fusions: tuple
    decoders: tuple
    head: ConvLayer
    store: ParamStore = field(compare=False, repr=False)

    @property
    def multiple(self):
        return 2 ** (self.cfg.levels - 1)

    @property
    def widths(self):
        return [self.cfg.base_channels * 2 ** level for level in range(self.cfg.levels)]


def _assemble(cfg, store, rng, zero_init):
    levels = cfg.levels
    widths = [cfg.base_channels * 2 ** level for level in range(levels)]

    stem = ConvLayer.create(store, "stem", ConvSpec.same(3, widths[0], kernel=3), rng)
    downs = []
    for level in range(1, levels):
        spec = ConvSpec(widths[level - 1], widths[level], kernel=3, stride=2, padding=1)
        downs.append(ConvLayer.create(store, f"down{level}", spec, rng))

    paths = []
    for level in range(levels):
        paths.append(tuple(build_blocks(cfg.block, store, f"level{level}.block", widths[level],
                                        cfg.depths[level], rng, zero_init, cfg.activation)))

    cmims = []
    if cfg.cmim:
        for level in range(levels - 1):
            cmims.append(build_cmim(store, f"cmim{level}", widths[level], widths[level + 1], rng,
                                    zero_init=zero_init, eps=cfg.ln_eps))

    ups, fusions, decoders = [], [], []
    for level in range(levels - 1):
        ups.append(ConvLayer.create(store, f"up{level}", ConvSpec(widths[level + 1], 4 * widths[level]), rng))
        if cfg.fusion == "itfm":
            fusions.append(build_itfm(store, f"fuse{level}", widths[level], rng, cfg.pool_size, cfg.ln_eps))
        else:
            fusions.append(build_conv_fusion(store, f"fuse{level}", widths[level], rng))
        if cfg.edf:
            decoders.append(())
        else:
            decoders.append(tuple(build_blocks(cfg.block, store, f"decoder{level}.block", widths[level],
                                               cfg.depths[level], rng, zero_init, cfg.activation)))

    head_spec = ConvSpec.same(widths[0], 4 if cfg.src else 3, kernel=3)
    # a zero head only makes sense when SRC turns it into the identity
    head = ConvLayer.create(store, "head", head_spec, rng, zero=zero_init and cfg.src)

    return Net(cfg, stem, tuple(downs), tuple(paths), tuple(cmims), tuple(ups), tuple(fusions),
               tuple(decoders), head, store)


def build(cfg, seed=0, dtype=np.float32, zero_init=True):
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    net = _assemble(cfg, store, rng, zero_init)
    logger.debug(f"Built network: {len(store)} tensors, {store.count()} parameters (seed={seed})")
    return store, net


def from_store(cfg, store):
    expected = build(cfg, 0, store.dtype)[0].names()
    missing = [name for name in expected if name not in store]
    extra = sorted(set(store.names()) - set(expected))
    if missing or extra:
        raise ConfigError(f"parameters do not match the config: missing {missing[:3]}, unexpected {extra[:3]}")
    return _assemble(cfg, store, None, True)


def _input_var(net, hazy):
    if isinstance(hazy, Var):
        return hazy
    return Var(tensor.as_tensor(hazy, net.store.dtype))


def forward(net, hazy):
    x = _input_var(net, hazy)
    if x.value.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"network input must be (n, 3, h, w) RGB, got {x.shape}")
    h, w = x.shape[2:]
    padded, _ = tensor.reflect_pad_to_multiple(x.value, net.multiple)
    if padded is not x.value:
        x = Var(padded, tape=x.tape)

    encoded = [net.stem(x)]
    for down in net.downs:
        encoded.append(down(encoded[-1]))
    feats = [run_blocks(path, e) for path, e in zip(net.paths, encoded)]

    for level, cmim in enumerate(net.cmims):
        feats[level], feats[level + 1] = cmim(feats[level], feats[level + 1])

    d = feats[-1]
    for level in reversed(range(net.cfg.levels - 1)):
        up = ag.pixel_shuffle(net.ups[level](d), 2)
        d = net.fusions[level](feats[level], up)
        d = run_blocks(net.decoders[level], d)

    out = net.head(d)
    if net.cfg.src:
        out = src_apply(out, x)
    return ag.crop(out, h, w)


def predict(net, image):
    '''Untaped forward on a (3, h, w) or (n, 3, h, w) array, clipped to [0, 1].'''
    batch = np.asarray(image)
    single = batch.ndim == 3
    if single:
        batch = batch[None]
    out = np.clip(forward(net, batch).value, 0.0, 1.0)
    return out[0] if single else out


def count_params(net):
    return net.store.count()


def _describe_rows(net, input_hw):
    m = net.multiple
    h0, w0 = (-(-input_hw[0] // m) * m, -(-input_hw[1] // m) * m)
    hw = [(h0 >> level, w0 >> level) for level in range(net.cfg.levels)]

    rows = [net.stem.row(*hw[0])]
    for level, down in enumerate(net.downs, start=1):
        rows.append(down.row(*hw[level - 1]))
    for level, path in enumerate(net.paths):
        for block in path:
            rows.extend(block.rows(*hw[level]))
    for level, cmim in enumerate(net.cmims):
        rows.extend(cmim.rows(*hw[level]))
    for level in reversed(range(net.cfg.levels - 1)):
        rows.append(net.ups[level].row(*hw[level + 1]))
        rows.extend(net.fusions[level].rows(*hw[level]))
        for block in net.decoders[level]:
            rows.extend(block.rows(*hw[level]))
    rows.append(net.head.row(*hw[0]))
    return rows


def describe(target, input_hw=(256, 256)):
    '''Per-layer table of parameters and FLOPs for a Net or a NetConfig.'''
    net = target if isinstance(target, Net) else build(target)[1]
    return pd.DataFrame(_describe_rows(net, input_hw), columns=DESCRIBE_COLUMNS)


def count_flops(net, input_hw):
    return int(describe(net, input_hw)["flops"].sum())


def ablation_ladder(base_channels=8, depths=(1, 1, 1), **overrides):
    '''Ordered (label, NetConfig) rungs from the plain U-shaped baseline to the full model.'''
    cfg = NetConfig(base_channels=base_channels, depths=tuple(depths), levels=len(depths),
                    block="fnb", fusion="conv", cmim=False, src=False, edf=False, **overrides)
    ladder = [("Baseline", cfg)]
    for label, change in (("+EDF", {"edf": True}), ("+ITFM", {"fusion": "itfm"}),
                          ("+CMIM", {"cmim": True}), ("+MPEB", {"block": "mpeb"}),
                          ("+SRC", {"src": True})):
        cfg = replace(cfg, **change)
        ladder.append((label, cfg))
    return ladder


def describe_ladder(base_channels=8, depths=(1, 1, 1), input_hw=(256, 256)):
    records = []
    previous = None
    for label, cfg in ablation_ladder(base_channels, depths):
        table = describe(cfg, input_hw)
        params, flops = int(table["params"].sum()), int(table["flops"].sum())
        records.append({"rung": label, "params": params, "flops": flops,
                        "delta_params": 0 if previous is None else params - previous})
        previous = params
    return pd.DataFrame(records)
