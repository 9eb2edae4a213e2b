# gradcheck.py - Finite-difference verification of every backward rule
'''
grad_check() compares the tape's analytic gradients with central differences
(step 1e-5 by default, float64) and returns the worst relative error
|g_a - g_n| / max(|g_a|, |g_n|, 1e-8) over the checked coordinates.

The suite below builds one small float64 problem per op, block and for the
whole tiny network. Inputs are registered as parameters next to the weights
so input gradients are checked too. Each problem reduces its output to a
scalar with a fixed random weighting, so no gradient is trivially uniform.
'''

import math
import os
import sys

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(__file__))
import autograd as ag
from autograd import ParamStore, Tape, Var, param
from blocks import build_cmim, build_conv_fusion, build_fnb, build_itfm, build_mpeb, mpeb_branch_specs, src_apply
from config import NetConfig
from network import build, forward
from tensor import ConvSpec
from train import l1_loss
from utils import logger

STEP = 1e-5
FLOOR = 1e-8
TOLERANCE = 1e-4
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

# whole-network weight gradients go down to O(1e-9), below the roundoff of a 1e-5 step
STEPS = {"network": 1e-4}


class GradCheckError(ArithmeticError):
    pass


def relative_error(analytic, numeric, floor=FLOOR):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _coordinates(size, max_coords, rng):
    if max_coords is None or size <= max_coords:
        return range(size)
    return sorted(rng.choice(size, size=max_coords, replace=False))


def grad_check(f, store, step=STEP, max_coords=None, rng=None):
    '''f(tape) must return a scalar Var; f(None) is the untaped evaluation.'''
    if store.dtype != np.float64:
        raise ValueError("gradient checks run on a float64 ParamStore")
    rng = rng if rng is not None else np.random.default_rng(0)

    tape = Tape()
    ag.backward(f(tape))
    analytic = {name: p.grad.copy() for name, p in store.items()}

    worst = 0.0
    for name, p in store.items():
        flat = p.value.reshape(-1)
        for i in _coordinates(flat.size, max_coords, rng):
            original = flat[i]
            flat[i] = original + step
            plus = float(f(None).value)
            flat[i] = original - step
            minus = float(f(None).value)
            flat[i] = original

            numeric = (plus - minus) / (2.0 * step)
            exact = float(analytic[name].reshape(-1)[i])
            if not (math.isfinite(numeric) and math.isfinite(exact)):
                raise GradCheckError(f"{name}[{i}]: non-finite gradient (analytic {exact}, numeric {numeric})")
            worst = max(worst, relative_error(exact, numeric))
    return worst


# ---------------------------------------------------------------- problems

def _weighted(out, weights):
    return ag.sum_(ag.mul(out, weights))


def _away_from_zero(rng, shape, low=0.1, high=1.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, high, size=shape)


def _problem(rng, inputs, body):
    '''Register inputs in a fresh store and weight body's output by a fixed random tensor.'''
    store = ParamStore(np.float64)
    for name, value in inputs.items():
        store.add(name, value)
    sample = body({name: param(None, store, name) for name in inputs})
    weights = rng.standard_normal(sample.shape)

    def f(tape):
        return _weighted(body({name: param(tape, store, name) for name in inputs}), weights)

    return store, f


def _pointwise(op):
    def problem(rng):
        shape = (2, 3, 4, 4)
        if op in (ag.relu, ag.absolute):
            inputs = {"x": _away_from_zero(rng, shape)}
            return _problem(rng, inputs, lambda v: op(v["x"]))
        if op is ag.gelu:
            # gelu' vanishes near -0.75
            return _problem(rng, {"x": rng.uniform(-0.5, 2.5, size=shape)}, lambda v: op(v["x"]))
        inputs = {"a": rng.normal(size=shape), "b": rng.uniform(0.5, 1.5, size=(1, 3, 1, 4))}
        return _problem(rng, inputs, lambda v: op(v["a"], v["b"]))
    return problem


def _reduction(op):
    def problem(rng):
        store = ParamStore(np.float64)
        store.add("x", rng.uniform(-0.5, 2.5, size=(2, 3, 3, 3)))
        return store, lambda tape: ag.mul(op(ag.gelu(param(tape, store, "x"))), 1.7)
    return problem


def _conv(rng):
    specs = list(mpeb_branch_specs(8))
    specs += [ConvSpec(2, 3, kernel=3, stride=2, padding=1),
              ConvSpec(4, 6, kernel=3, stride=2, padding=1, groups=2),
              ConvSpec.same(4, 4, kernel=3, dilation=2, groups=4, bias=False)]
    inputs = {"x2": rng.normal(size=(2, 2, 9, 9)), "x4": rng.normal(size=(1, 4, 9, 9))}
    for i, spec in enumerate(specs):
        fan_in = spec.weight_shape[1] * spec.kernel ** 2
        inputs[f"w{i}"] = rng.normal(size=spec.weight_shape) / math.sqrt(fan_in)
        if spec.bias:
            inputs[f"b{i}"] = rng.normal(size=(spec.out_channels,))

    def body(v):
        outs = []
        for i, spec in enumerate(specs):
            x = v["x2"] if spec.in_channels == 2 else v["x4"]
            outs.append(ag.conv2d(x, v[f"w{i}"], v.get(f"b{i}"), spec))
        return ag.concat_channels([ag.reshape(o, (1, -1, 1, 1)) for o in outs])

    return _problem(rng, inputs, body)


def _matmul(rng):
    inputs = {"a": rng.normal(size=(2, 3, 5)), "b": rng.normal(size=(2, 5, 4))}
    return _problem(rng, inputs, lambda v: ag.transpose(ag.matmul(v["a"], v["b"])))


def _softmax(rng):
    inputs = {"x": rng.normal(size=(2, 4, 6)), "alpha": np.array([0.7])}
    return _problem(rng, inputs, lambda v: ag.softmax_lastdim(v["x"], v["alpha"]))


def _layer_norm(rng):
    inputs = {"x": rng.normal(size=(2, 5, 3, 3)), "gamma": rng.uniform(0.5, 1.5, size=5),
              "beta": rng.normal(size=5)}
    return _problem(rng, inputs, lambda v: ag.layer_norm_channels(v["x"], v["gamma"], v["beta"]))


def _pool(rng):
    inputs = {"x": rng.normal(size=(2, 3, 5, 7))}
    return _problem(rng, inputs, lambda v: ag.concat_channels([
        ag.adaptive_avg_pool(ag.crop(v["x"], 4, 4), (1, 1)),
        ag.crop(ag.adaptive_avg_pool(v["x"], (2, 3)), 1, 1)]))


def _shuffle(rng):
    inputs = {"x": rng.normal(size=(1, 2, 4, 6)), "y": rng.normal(size=(1, 8, 2, 3))}

    def body(v):
        parts = ag.split_channels(ag.pixel_unshuffle(v["x"], 2), [3, 5])
        mixed = ag.concat_channels([parts[1], parts[0], v["y"]])
        return ag.pixel_shuffle(mixed, 2)

    return _problem(rng, inputs, body)


def _itfm(rng):
    store = ParamStore(np.float64)
    p = build_itfm(store, "itfm", 8, rng, pool_size=(1, 1))
    store.add("x_skip", rng.normal(size=(1, 8, 6, 6)))
    store.add("x_dec", rng.normal(size=(1, 8, 6, 6)))
    weights = rng.standard_normal((1, 8, 6, 6))
    return store, lambda tape: _weighted(p(param(tape, store, "x_skip"), param(tape, store, "x_dec")), weights)


def _cmim(rng):
    store = ParamStore(np.float64)
    p = build_cmim(store, "cmim", 4, 8, rng, zero_init=False)
    store.add("x_hi", rng.normal(size=(1, 4, 8, 8)))
    store.add("x_lo", rng.normal(size=(1, 8, 4, 4)))
    w_hi, w_lo = rng.standard_normal((1, 4, 8, 8)), rng.standard_normal((1, 8, 4, 4))

    def f(tape):
        hi, lo = p(param(tape, store, "x_hi"), param(tape, store, "x_lo"))
        return ag.add(_weighted(hi, w_hi), _weighted(lo, w_lo))

    return store, f


def _block(builder):
    def problem(rng):
        store = ParamStore(np.float64)
        p = builder(store, "block", 8, rng, zero_init=False)
        store.add("x", rng.normal(size=(1, 8, 8, 8)))
        weights = rng.standard_normal((1, 8, 8, 8))
        return store, lambda tape: _weighted(p(param(tape, store, "x")), weights)
    return problem


def _conv_fusion(rng):
    store = ParamStore(np.float64)
    p = build_conv_fusion(store, "fuse", 4, rng)
    store.add("x_skip", rng.normal(size=(1, 4, 5, 5)))
    store.add("x_dec", rng.normal(size=(1, 4, 5, 5)))
    weights = rng.standard_normal((1, 4, 5, 5))
    return store, lambda tape: _weighted(p(param(tape, store, "x_skip"), param(tape, store, "x_dec")), weights)


def _src(rng):
    inputs = {"head": rng.normal(size=(2, 4, 3, 3)), "hazy": rng.uniform(size=(2, 3, 3, 3))}
    return _problem(rng, inputs, lambda v: src_apply(v["head"], v["hazy"]))


def network_problem(rng, cfg=None, hw=(16, 16)):
    cfg = cfg or NetConfig(base_channels=8, depths=(1, 1, 1))
    store, net = build(cfg, int(rng.integers(2 ** 31)), np.float64, zero_init=False)
    hazy = rng.uniform(size=(1, 3) + tuple(hw))
    # residuals stay at least 0.05 from the L1 kink; a small loss keeps roundoff small
    prediction = forward(net, hazy).value
    target = prediction + _away_from_zero(rng, prediction.shape, 0.05, 0.15)
    return store, lambda tape: l1_loss(forward(net, Var(hazy, tape=tape)), target)


CHECKS = {
    "add": (_pointwise(ag.add), None),
    "sub": (_pointwise(ag.sub), None),
    "mul": (_pointwise(ag.mul), None),
    "div": (_pointwise(ag.div), None),
    "gelu": (_pointwise(ag.gelu), None),
    "relu": (_pointwise(ag.relu), None),
    "abs": (_pointwise(ag.absolute), None),
    "sum": (_reduction(ag.sum_), None),
    "mean": (_reduction(ag.mean), None),
    "conv2d": (_conv, 40),
    "matmul": (_matmul, None),
    "softmax": (_softmax, None),
    "layer_norm": (_layer_norm, None),
    "adaptive_pool": (_pool, None),
    "pixel_shuffle": (_shuffle, None),
    "src": (_src, None),
    "conv_fusion": (_conv_fusion, 24),
    "itfm": (_itfm, 24),
    "cmim": (_cmim, 24),
    "mpeb": (_block(build_mpeb), 24),
    "fnb": (_block(build_fnb), 24),
    "network": (network_problem, 12),
}


def run_check(name, seed, tol=TOLERANCE):
    builder, max_coords = CHECKS[name]
    rng = np.random.default_rng(seed)
    store, f = builder(rng)
    error = grad_check(f, store, step=STEPS.get(name, STEP), max_coords=max_coords, rng=rng)
    return {"check": name, "seed": seed, "max_rel_err": error, "status": "ok" if error < tol else "FAIL"}


def run_gradcheck_suite(seeds=DEFAULT_SEEDS, tol=TOLERANCE, names=None):
    unknown = [name for name in names or () if name not in CHECKS]
    if unknown:
        raise ValueError(f"unknown gradient checks {unknown}; available: {', '.join(CHECKS)}")
    rows = []
    for name in names or CHECKS:
        for seed in seeds:
            row = run_check(name, seed, tol)
            rows.append(row)
            if row["status"] != "ok":
                logger.error(f"❌ gradcheck {name} seed={seed}: max relative error {row['max_rel_err']:.3e}")
    report = pd.DataFrame(rows, columns=["check", "seed", "max_rel_err", "status"])
    failed = int((report["status"] != "ok").sum())
    logger.info(f"Gradient checks: {len(report) - failed}/{len(report)} passed (tol={tol:g})")
    return report


def format_check_line(row):
    return f"{row['check']} {row['seed']} {row['max_rel_err']:.3e} {row['status']}"
