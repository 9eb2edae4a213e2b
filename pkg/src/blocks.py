# blocks.py - Fusion, interaction and learning blocks composed from taped ops
'''
Every block has a build_* function that registers its parameters in a
ParamStore under a name prefix (or, with rng=None, checks that an already
loaded store holds them) and a *_forward function that runs it on Vars.

  ITFM  fuses a skip feature with the up-sampled decoder feature through
        channel attention computed from pooled global features.
  CMIM  computes one channel attention map between two adjacent levels and
        uses it (and its transpose) to enhance both levels residually.
  MPEB  splits channels into quarters: a 1x1 conv and three depthwise
        dilated convs (kernels 3/5/7, dilation 3), then a pointwise MLP.
  FNB   baseline block: 3x3 conv on the first channel quarter only.
  SRC   soft residual head: out = K * hazy - B + hazy.
'''

import math
from dataclasses import dataclass, field

import numpy as np

import autograd as ag
from autograd import ParamStore, param
from tensor import LN_EPS, ConvSpec, ShapeError

# (kernel, dilation) per channel quarter; quarter 1 is a plain 1x1 conv
MPEB_SCHEDULE = ((1, 1), (3, 3), (5, 3), (7, 3))
MLP_EXPANSION = 2

ACTIVATIONS = {"gelu": ag.gelu, "relu": ag.relu}


def _register(store, name, shape, rng, init):
    if rng is None:
        if name not in store:
            raise KeyError(f"parameter {name} missing from store")
        if store.value(name).shape != tuple(shape):
            raise ShapeError(f"{name}: stored shape {store.value(name).shape} != {tuple(shape)}")
        return
    store.add(name, init(rng, shape))


def _kaiming_uniform(fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return lambda rng, shape: rng.uniform(-bound, bound, size=shape)


def _zeros(rng, shape):
    return np.zeros(shape)


def _ones(rng, shape):
    return np.ones(shape)


def _tape(*xs):
    for x in xs:
        if x.tape is not None:
            return x.tape
    return None


def _hw(h, w):
    return f"{h}x{w}"


@dataclass(frozen=True)
class ConvLayer:
    name: str
    spec: ConvSpec
    store: ParamStore = field(compare=False, repr=False)

    @classmethod
    def create(cls, store, name, spec, rng, zero=False):
        fan_in = spec.weight_shape[1] * spec.kernel * spec.kernel
        init = _zeros if zero else _kaiming_uniform(fan_in)
        _register(store, f"{name}.w", spec.weight_shape, rng, init)
        if spec.bias:
            _register(store, f"{name}.b", (spec.out_channels,), rng, init)
        return cls(name, spec, store)

    def __call__(self, x):
        w = param(x.tape, self.store, f"{self.name}.w")
        b = param(x.tape, self.store, f"{self.name}.b") if self.spec.bias else None
        return ag.conv2d(x, w, b, self.spec)

    def row(self, h_in, w_in):
        h_out, w_out = self.spec.output_hw(h_in, w_in)
        s = self.spec
        kind = f"conv{s.kernel}x{s.kernel}"
        if s.dilation > 1:
            kind += f"/d{s.dilation}"
        if s.groups > 1:
            kind += f"/g{s.groups}"
        if s.stride > 1:
            kind += f"/s{s.stride}"
        return {"name": self.name, "kind": kind,
                "shape": f"{s.out_channels}x{_hw(h_out, w_out)}",
                "params": s.param_count, "flops": s.flops(h_out, w_out)}


@dataclass(frozen=True)
class LayerNormLayer:
    name: str
    channels: int
    eps: float
    store: ParamStore = field(compare=False, repr=False)

    @classmethod
    def create(cls, store, name, channels, rng, eps=LN_EPS):
        _register(store, f"{name}.gamma", (channels,), rng, _ones)
        _register(store, f"{name}.beta", (channels,), rng, _zeros)
        return cls(name, channels, eps, store)

    def __call__(self, x):
        gamma = param(x.tape, self.store, f"{self.name}.gamma")
        beta = param(x.tape, self.store, f"{self.name}.beta")
        return ag.layer_norm_channels(x, gamma, beta, self.eps)

    def row(self, h, w):
        return {"name": self.name, "kind": "layernorm", "shape": f"{self.channels}x{_hw(h, w)}",
                "params": 2 * self.channels, "flops": 0}


@dataclass(frozen=True)
class Mlp:
    expand: ConvLayer
    project: ConvLayer
    activation: str = "gelu"

    @classmethod
    def create(cls, store, prefix, channels, rng, zero_init=True, activation="gelu"):
        hidden = MLP_EXPANSION * channels
        expand = ConvLayer.create(store, f"{prefix}.expand", ConvSpec(channels, hidden), rng)
        project = ConvLayer.create(store, f"{prefix}.project", ConvSpec(hidden, channels), rng,
                                   zero=zero_init)
        return cls(expand, project, activation)

    def __call__(self, x):
        return self.project(ACTIVATIONS[self.activation](self.expand(x)))

    def rows(self, h, w):
        return [self.expand.row(h, w), self.project.row(h, w)]


def _alpha_row(name, params=1):
    return {"name": name, "kind": "scale", "shape": "1", "params": params, "flops": 0}


def _matmul_row(name, m, k, n):
    return {"name": name, "kind": "matmul", "shape": f"{m}x{n}", "params": 0, "flops": 2 * m * k * n}


def _register_alpha(store, name, dim, rng):
    _register(store, name, (1,), rng, lambda _, shape: np.full(shape, 1.0 / math.sqrt(dim)))


# ---------------------------------------------------------------- ITFM

@dataclass(frozen=True)
class ItfmParams:
    prefix: str
    channels: int
    pool_size: tuple
    ln_skip: LayerNormLayer
    ln_dec: LayerNormLayer
    qk_proj: ConvLayer
    v_proj: ConvLayer
    out_proj: ConvLayer
    store: ParamStore = field(compare=False, repr=False)

    def alpha(self, tape):
        return param(tape, self.store, f"{self.prefix}.alpha")

    def __call__(self, x_skip, x_dec):
        return itfm_forward(x_skip, x_dec, self)

    def rows(self, h, w):
        c, (ph, pw) = self.channels, self.pool_size
        return [
            self.ln_skip.row(h, w), self.ln_dec.row(h, w),
            self.qk_proj.row(ph, pw), self.v_proj.row(h, w), self.out_proj.row(h, w),
            _alpha_row(f"{self.prefix}.alpha"),
            _matmul_row(f"{self.prefix}.attention", c, ph * pw, c),
            _matmul_row(f"{self.prefix}.fuse", c, c, h * w),
        ]


def build_itfm(store, prefix, c, rng, pool_size=(1, 1), eps=LN_EPS):
    ln_skip = LayerNormLayer.create(store, f"{prefix}.ln_skip", c, rng, eps)
    ln_dec = LayerNormLayer.create(store, f"{prefix}.ln_dec", c, rng, eps)
    qk_proj = ConvLayer.create(store, f"{prefix}.qk_proj", ConvSpec(2 * c, 2 * c), rng)
    v_proj = ConvLayer.create(store, f"{prefix}.v_proj", ConvSpec(2 * c, c), rng)
    out_proj = ConvLayer.create(store, f"{prefix}.out_proj", ConvSpec(c, c), rng)
    _register_alpha(store, f"{prefix}.alpha", c, rng)
    return ItfmParams(prefix, c, tuple(pool_size), ln_skip, ln_dec, qk_proj, v_proj, out_proj, store)


def itfm_attention(x_skip, x_dec, p):
    if x_skip.shape != x_dec.shape:
        raise ShapeError(f"ITFM inputs differ: {x_skip.shape} vs {x_dec.shape}")
    n, c = x_skip.shape[:2]
    if c != p.channels:
        raise ShapeError(f"ITFM built for {p.channels} channels, got {c}")
    cells = p.pool_size[0] * p.pool_size[1]

    z = ag.concat_channels([p.ln_skip(x_skip), p.ln_dec(x_dec)])
    q, k = ag.split_channels(p.qk_proj(ag.adaptive_avg_pool(z, p.pool_size)), [c, c])
    logits = ag.matmul(ag.reshape(q, (n, c, cells)), ag.transpose(ag.reshape(k, (n, c, cells))))
    return ag.softmax_lastdim(logits, p.alpha(_tape(x_skip, x_dec)))


def itfm_forward(x_skip, x_dec, p):
    attn = itfm_attention(x_skip, x_dec, p)
    n, c, h, w = x_skip.shape
    v = p.v_proj(ag.concat_channels([x_skip, x_dec]))
    fused = ag.matmul(attn, ag.reshape(v, (n, c, h * w)))
    return p.out_proj(ag.reshape(fused, (n, c, h, w)))


@dataclass(frozen=True)
class ConvFusionParams:
    prefix: str
    channels: int
    fuse: ConvLayer

    def __call__(self, x_skip, x_dec):
        return conv_fusion_forward(x_skip, x_dec, self)

    def rows(self, h, w):
        return [self.fuse.row(h, w)]


def build_conv_fusion(store, prefix, c, rng):
    return ConvFusionParams(prefix, c, ConvLayer.create(store, f"{prefix}.fuse", ConvSpec(2 * c, c), rng))


def conv_fusion_forward(x_skip, x_dec, p):
    if x_skip.shape != x_dec.shape:
        raise ShapeError(f"fusion inputs differ: {x_skip.shape} vs {x_dec.shape}")
    return p.fuse(ag.concat_channels([x_skip, x_dec]))


# ---------------------------------------------------------------- CMIM

@dataclass(frozen=True)
class CmimParams:
    prefix: str
    channels: int
    low_channels: int
    dim: int
    ln_hi: LayerNormLayer
    ln_lo: LayerNormLayer
    q_proj: ConvLayer
    k_proj: ConvLayer
    v_hi_proj: ConvLayer
    out_hi_proj: ConvLayer
    v_lo_proj: ConvLayer
    out_lo_proj: ConvLayer
    store: ParamStore = field(compare=False, repr=False)

    def alpha(self, tape):
        return param(tape, self.store, f"{self.prefix}.alpha")

    def __call__(self, x_hi, x_lo):
        return cmim_forward(x_hi, x_lo, self)

    def rows(self, h, w):
        d, hl, wl = self.dim, h // 2, w // 2
        return [
            self.ln_hi.row(h, w), self.ln_lo.row(hl, wl),
            self.q_proj.row(hl, wl), self.k_proj.row(hl, wl),
            self.v_hi_proj.row(h, w), self.out_hi_proj.row(h, w),
            self.v_lo_proj.row(hl, wl), self.out_lo_proj.row(hl, wl),
            _alpha_row(f"{self.prefix}.alpha"),
            _matmul_row(f"{self.prefix}.attention", d, hl * wl, d),
            _matmul_row(f"{self.prefix}.enhance_hi", d, d, h * w),
            _matmul_row(f"{self.prefix}.enhance_lo", d, d, hl * wl),
        ]


def build_cmim(store, prefix, c_hi, c_lo, rng, dim=None, zero_init=True, eps=LN_EPS):
    d = dim or c_hi
    ln_hi = LayerNormLayer.create(store, f"{prefix}.ln_hi", c_hi, rng, eps)
    ln_lo = LayerNormLayer.create(store, f"{prefix}.ln_lo", c_lo, rng, eps)
    q_proj = ConvLayer.create(store, f"{prefix}.q_proj", ConvSpec(4 * c_hi, d), rng)
    k_proj = ConvLayer.create(store, f"{prefix}.k_proj", ConvSpec(c_lo, d), rng)
    v_hi_proj = ConvLayer.create(store, f"{prefix}.v_hi_proj", ConvSpec(c_hi, d), rng)
    out_hi_proj = ConvLayer.create(store, f"{prefix}.out_hi_proj", ConvSpec(d, c_hi), rng, zero=zero_init)
    v_lo_proj = ConvLayer.create(store, f"{prefix}.v_lo_proj", ConvSpec(c_lo, d), rng)
    out_lo_proj = ConvLayer.create(store, f"{prefix}.out_lo_proj", ConvSpec(d, c_lo), rng, zero=zero_init)
    _register_alpha(store, f"{prefix}.alpha", d, rng)
    return CmimParams(prefix, c_hi, c_lo, d, ln_hi, ln_lo, q_proj, k_proj, v_hi_proj, out_hi_proj,
                      v_lo_proj, out_lo_proj, store)


def cmim_attention(x_hi, x_lo, p):
    n, c, h, w = x_hi.shape
    if h % 2 or w % 2:
        raise ShapeError(f"CMIM needs even spatial dims on the finer input, got {h}x{w}")
    if x_lo.shape[0] != n or tuple(x_lo.shape[2:]) != (h // 2, w // 2):
        raise ShapeError(f"CMIM resolution ratio must be exactly 2: {x_hi.shape} vs {x_lo.shape}")
    if c != p.channels or x_lo.shape[1] != p.low_channels:
        raise ShapeError(f"CMIM built for {p.channels}/{p.low_channels} channels")
    d, cells = p.dim, (h // 2) * (w // 2)

    q = p.q_proj(ag.pixel_unshuffle(p.ln_hi(x_hi), 2))
    k = p.k_proj(p.ln_lo(x_lo))
    logits = ag.matmul(ag.reshape(q, (n, d, cells)), ag.transpose(ag.reshape(k, (n, d, cells))))
    return ag.softmax_lastdim(logits, p.alpha(_tape(x_hi, x_lo)))


def _enhance(x, attn, v_proj, out_proj, dim):
    n, _, h, w = x.shape
    v = ag.reshape(v_proj(x), (n, dim, h * w))
    mixed = ag.reshape(ag.matmul(attn, v), (n, dim, h, w))
    return ag.add(x, out_proj(mixed))


def cmim_enhance_hi(x_hi, attn, p):
    return _enhance(x_hi, attn, p.v_hi_proj, p.out_hi_proj, p.dim)


def cmim_enhance_lo(x_lo, attn, p):
    return _enhance(x_lo, ag.transpose(attn), p.v_lo_proj, p.out_lo_proj, p.dim)


def cmim_forward(x_hi, x_lo, p):
    attn = cmim_attention(x_hi, x_lo, p)
    return cmim_enhance_hi(x_hi, attn, p), cmim_enhance_lo(x_lo, attn, p)


# ---------------------------------------------------------------- MPEB / FNB

def _check_quarters(c):
    if c % 4:
        raise ShapeError(f"block channels must be divisible by 4, got {c}")
    return c // 4


@dataclass(frozen=True)
class MpebParams:
    prefix: str
    channels: int
    branches: tuple
    mlp: Mlp

    def __call__(self, x):
        return mpeb_forward(x, self)

    def rows(self, h, w):
        return [b.row(h, w) for b in self.branches] + self.mlp.rows(h, w)


def mpeb_branch_specs(c):
    q = _check_quarters(c)
    specs = []
    for i, (kernel, dilation) in enumerate(MPEB_SCHEDULE):
        groups = 1 if i == 0 else q
        specs.append(ConvSpec.same(q, q, kernel=kernel, dilation=dilation, groups=groups))
    return specs


def build_mpeb(store, prefix, c, rng, zero_init=True, activation="gelu"):
    branches = tuple(ConvLayer.create(store, f"{prefix}.branch{i + 1}", spec, rng)
                     for i, spec in enumerate(mpeb_branch_specs(c)))
    mlp = Mlp.create(store, f"{prefix}.mlp", c, rng, zero_init, activation)
    return MpebParams(prefix, c, branches, mlp)


def mpeb_forward(x, p):
    c = x.shape[1]
    if c != p.channels:
        raise ShapeError(f"MPEB built for {p.channels} channels, got {c}")
    q = _check_quarters(c)
    quarters = ag.split_channels(x, [q] * 4)
    views = [branch(part) for branch, part in zip(p.branches, quarters)]
    return ag.add(x, p.mlp(ag.concat_channels(views)))


@dataclass(frozen=True)
class FnbParams:
    prefix: str
    channels: int
    partial: ConvLayer
    mlp: Mlp

    def __call__(self, x):
        return fnb_forward(x, self)

    def rows(self, h, w):
        return [self.partial.row(h, w)] + self.mlp.rows(h, w)


def build_fnb(store, prefix, c, rng, zero_init=True, activation="gelu"):
    q = _check_quarters(c)
    partial = ConvLayer.create(store, f"{prefix}.partial", ConvSpec.same(q, q, kernel=3), rng)
    mlp = Mlp.create(store, f"{prefix}.mlp", c, rng, zero_init, activation)
    return FnbParams(prefix, c, partial, mlp)


def fnb_partial(x, p):
    c = x.shape[1]
    if c != p.channels:
        raise ShapeError(f"FNB built for {p.channels} channels, got {c}")
    q = _check_quarters(c)
    first, rest = ag.split_channels(x, [q, c - q])
    return ag.concat_channels([p.partial(first), rest])


def fnb_forward(x, p):
    return ag.add(x, p.mlp(fnb_partial(x, p)))


BLOCK_BUILDERS = {"mpeb": build_mpeb, "fnb": build_fnb}


def build_blocks(kind, store, prefix, c, count, rng, zero_init=True, activation="gelu"):
    builder = BLOCK_BUILDERS[kind]
    return [builder(store, f"{prefix}.{i}", c, rng, zero_init, activation) for i in range(count)]


def run_blocks(blocks, x):
    for block in blocks:
        x = block(x)
    return x


# ---------------------------------------------------------------- SRC

def src_apply(head_out, hazy):
    if head_out.shape[1] != 4 or hazy.shape[1] != 3:
        raise ShapeError(f"SRC needs a 4-channel head and RGB input, got {head_out.shape} / {hazy.shape}")
    gate, bias = ag.split_channels(head_out, [1, 3])
    return ag.add(ag.sub(ag.mul(gate, hazy), bias), hazy)
