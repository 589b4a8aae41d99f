"""Finite-difference verification of every differentiable op.

Each registered op gets seeded random inputs chosen to stay away from its
kinks (ties, clamp edges, the origin of relu/abs), a random linear projection
to make the output scalar, and a central-difference sweep over every input
element. The registry lists each differentiable op exactly once, so a green
report certifies the whole engine.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tape, constant


@dataclass
class OpReport:
    name: str
    max_err: float
    ok: bool


def _signed_away_from_zero(rng, shape, lo=0.05, hi=2.0):
    mag = rng.uniform(lo, hi, size=shape)
    sign = np.where(rng.integers(0, 2, size=shape) == 0, -1.0, 1.0)
    return mag * sign


def _spaced_values(rng, shape, gap=0.1):
    """Random values whose pairwise gaps are at least `gap` (no min/max ties)."""
    n = int(np.prod(shape))
    vals = np.arange(n) * gap + rng.uniform(0.0, gap * 0.5)
    return rng.permutation(vals).reshape(shape)


def _clamp_safe(rng, shape, lo=-0.5, hi=0.5, margin=0.1):
    """Half the values land inside (lo, hi), half outside; all off the edges."""
    u = rng.uniform(-1.0, 1.0, size=shape)
    inner = u * (hi - margin) / 0.5 * 0.5
    outer = np.sign(u) * (hi + margin + (np.abs(u) - 0.5) * 0.8)
    return np.where(np.abs(u) < 0.5, inner * 0.8, outer)


def _grid_in_cells(rng, h, w, gh, gw):
    """Normalized grid whose samples sit well inside cells and inside the image."""
    px = rng.integers(0, w - 1, size=(gh, gw)) + rng.uniform(0.1, 0.9, size=(gh, gw))
    py = rng.integers(0, h - 1, size=(gh, gw)) + rng.uniform(0.1, 0.9, size=(gh, gw))
    return np.stack([2 * px / (w - 1) - 1, 2 * py / (h - 1) - 1])


def _build_case(name, rng):
    """Return (input_arrays, apply) for one op; apply maps Tensors to a Tensor."""
    if name == "add":
        return [rng.normal(size=(3, 4)), rng.normal(size=(4,))], T.add
    if name == "sub":
        return [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], T.sub
    if name == "mul":
        return [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))], T.mul
    if name == "div":
        return [rng.normal(size=(3, 4)), _signed_away_from_zero(rng, (3, 4), lo=0.3)], T.div
    if name == "neg":
        return [rng.normal(size=(3, 4))], T.neg
    if name == "abs":
        return [_signed_away_from_zero(rng, (3, 4))], T.abs_
    if name == "exp":
        return [rng.uniform(-2.0, 2.0, size=(3, 4))], T.exp
    if name == "log":
        return [rng.uniform(0.2, 3.0, size=(3, 4))], T.log
    if name == "pow_scalar":
        return [rng.uniform(0.3, 2.0, size=(3, 4))], lambda x: T.pow_scalar(x, 1.7)
    if name == "min":
        a = _spaced_values(rng, (3, 4))
        b = rng.permutation(a.reshape(-1)).reshape(3, 4) + 0.031
        return [a, b], T.minimum
    if name == "max":
        a = _spaced_values(rng, (3, 4))
        b = rng.permutation(a.reshape(-1)).reshape(3, 4) + 0.031
        return [a, b], T.maximum
    if name == "clamp":
        return [_clamp_safe(rng, (3, 4))], lambda x: T.clamp(x, -0.5, 0.5)
    if name == "sin":
        return [rng.uniform(-3.0, 3.0, size=(3, 4))], T.sin
    if name == "cos":
        return [rng.uniform(-3.0, 3.0, size=(3, 4))], T.cos
    if name == "matmul":
        return [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], T.matmul
    if name == "conv2d":
        return ([rng.normal(size=(2, 4, 5)), rng.normal(size=(2, 2, 3, 3)),
                 rng.normal(size=(2,))],
                lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1))
    if name == "softmax":
        return [rng.normal(scale=2.0, size=(3, 5))], lambda x: T.softmax(x, axis=1)
    if name == "grid_sample":
        img = rng.uniform(size=(2, 5, 6))
        grid = _grid_in_cells(rng, 5, 6, 3, 3)
        return [img, grid], lambda i, g: T.grid_sample_bilinear(i, g)[0]
    if name == "sum":
        return [rng.normal(size=(3, 4))], lambda x: T.reduce_sum(x, axes=(1,))
    if name == "mean":
        return [rng.normal(size=(2, 3, 4))], lambda x: T.reduce_mean(x, axes=(0, 2))
    if name == "min_over_axis":
        return [_spaced_values(rng, (4, 5))], lambda x: T.reduce_min(x, axis=0)
    if name == "elu":
        return [_signed_away_from_zero(rng, (3, 4))], T.elu
    if name == "sigmoid":
        return [rng.normal(scale=2.0, size=(3, 4))], T.sigmoid
    if name == "relu":
        return [_signed_away_from_zero(rng, (3, 4))], T.relu
    if name == "concat":
        return ([rng.normal(size=(2, 3)), rng.normal(size=(2, 2))],
                lambda a, b: T.concat([a, b], axis=1))
    if name == "upsample":
        return [rng.normal(size=(2, 3, 4))], lambda x: T.upsample_bilinear(x, 2)
    if name == "reshape":
        return [rng.normal(size=(3, 4))], lambda x: T.reshape(x, (2, 6))
    if name == "moveaxis":
        return [rng.normal(size=(2, 3, 4))], lambda x: T.moveaxis(x, 0, 2)
    if name == "slice_axis":
        return [rng.normal(size=(3, 6))], lambda x: T.slice_axis(x, 1, 1, 4)
    raise ValueError(f"no gradcheck case for op '{name}'")


REGISTERED_OPS = (
    "add", "sub", "mul", "div", "neg", "abs", "exp", "log", "pow_scalar",
    "min", "max", "clamp", "sin", "cos",
    "matmul", "conv2d", "softmax", "grid_sample",
    "sum", "mean", "min_over_axis",
    "elu", "sigmoid", "relu",
    "concat", "upsample", "reshape", "moveaxis", "slice_axis",
)


def check_op(name, seed, step=1e-6, atol=1e-6, rtol=1e-4):
    """Central-difference check of one op for one seed.

    Returns (max_abs_err, ok) where ok demands |analytic - numeric| <=
    atol + rtol*|numeric| for every element of every input.
    """
    rng = np.random.default_rng(seed)
    inputs, apply = _build_case(name, rng)

    tape = Tape()
    leaves = [tape.leaf(a) for a in inputs]
    out = apply(*leaves)
    proj = rng.normal(size=out.shape)
    tape.backward(T.reduce_sum(out * constant(proj)))
    analytic = [tape.grad(leaf) for leaf in leaves]

    def scalar(arrs):
        val = apply(*[constant(a) for a in arrs]).data
        return float((val * proj).sum())

    max_err = 0.0
    ok = True
    for pos, base in enumerate(inputs):
        grad = analytic[pos]
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = scalar(inputs)
            flat[i] = orig - step
            lo = scalar(inputs)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            err = abs(grad.reshape(-1)[i] - numeric)
            max_err = max(max_err, err)
            if err > atol + rtol * abs(numeric):
                ok = False
    return max_err, ok


def run_gradcheck(seeds=range(10)):
    """Check every registered op across all seeds; one report entry per op."""
    reports = []
    for name in REGISTERED_OPS:
        worst = 0.0
        ok = True
        for seed in seeds:
            err, good = check_op(name, seed)
            worst = max(worst, err)
            ok = ok and good
        reports.append(OpReport(name, worst, ok))
    return reports


def format_report(reports):
    lines = []
    for r in reports:
        status = "ok" if r.ok else "FAIL"
        lines.append(f"{r.name:<16} max_err={r.max_err:.3e}  {status}")
    n_bad = sum(not r.ok for r in reports)
    lines.append(f"{len(reports)} ops checked, {n_bad} failed")
    return "\n".join(lines)
