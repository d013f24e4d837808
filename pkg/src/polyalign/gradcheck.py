"""Central-difference checks of every differentiable op and of the full training loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import net
from .deform import make_rng
from .training import total_loss_fn

TOLERANCE = 1e-4
EPSILON = 1e-4


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float((np.abs(a - n) / den).max())


def check_op(build: Callable[[list[ad.Tensor]], ad.Tensor], inputs: list[np.ndarray],
             seed: int = 0, epsilon: float = EPSILON, corrupt: bool = False) -> float:
    """Max relative error of d/d(inputs) sum(w * op(inputs)) for random weights ``w``.

    Every input coordinate is perturbed. ``corrupt`` scales the analytic
    gradient by 1.01 so callers can confirm the check can fail.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    out = build([ad.constant(x) for x in inputs])
    w = make_rng(seed).normal(size=out.value.shape)

    def f():
        return float((build([ad.constant(x) for x in inputs]).value * w).sum())

    ts = [ad.parameter(x) for x in inputs]
    ad.weighted_sum(build(ts), w).backward()
    worst = 0.0
    for x, t in zip(inputs, ts):
        ana = t.grad if t.grad is not None else np.zeros_like(x)
        if corrupt:
            ana = ana * 1.01
        num = np.empty_like(x)
        flat, nflat = x.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = f()
            flat[i] = orig - epsilon
            fm = f()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * epsilon)
        worst = max(worst, _rel_err(ana, num))
    return worst


def _spread(rng, shape, step=0.05):
    # distinct values at least ``step`` apart so max-pooling has no ties within epsilon
    n = int(np.prod(shape))
    return (rng.permutation(n) * step - n * step / 2).reshape(shape)


def op_cases(seed: int = 0) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    rng = make_rng(seed)
    target = rng.normal(size=(2, 4, 4, 3))
    bits = (rng.random((2, 4, 4, 3)) < 0.5).astype(np.float64)
    return {
        "conv2d": (lambda t: ad.conv2d(*t),
                   [rng.normal(size=(2, 5, 4, 3)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)]),
        "maxpool2": (lambda t: ad.maxpool2(t[0]), [_spread(rng, (2, 4, 6, 3))]),
        "upsample2": (lambda t: ad.upsample2(t[0]), [rng.normal(size=(2, 3, 2, 3))]),
        "concat": (lambda t: ad.concat(t), [rng.normal(size=(1, 3, 3, 2)), rng.normal(size=(1, 3, 3, 4))]),
        "silu": (lambda t: ad.silu(t[0]), [rng.normal(scale=3.0, size=(2, 3, 3, 4))]),
        "scaled_tanh": (lambda t: ad.scaled_tanh(t[0], net.DISP_BOUND_PX), [rng.normal(size=(2, 3, 3, 2))]),
        "transpose": (lambda t: ad.transpose(t[0], (0, 3, 1, 2)), [rng.normal(size=(2, 3, 4, 5))]),
        "sum_squared_error": (lambda t: ad.sum_squared_error(t[0], target), [rng.normal(size=target.shape)]),
        "bce_with_logits_mean": (lambda t: ad.bce_with_logits_mean(t[0], bits),
                                 [rng.normal(scale=3.0, size=bits.shape)]),
    }


def check_all_ops(seed: int = 0, epsilon: float = EPSILON) -> dict[str, float]:
    return {name: check_op(build, xs, seed, epsilon) for name, (build, xs) in op_cases(seed).items()}


def check_training_loss(widths=(4, 8), fusion: str = "concat", size: int = 8, batch: int = 2,
                        seg_weight: float = 0.1, n_coords: int = 200, seed: int = 0,
                        epsilon: float = EPSILON) -> float:
    """Composed displacement + weighted BCE loss through the whole network, float64.

    Targets sit near the current prediction so the loss stays O(1) and
    finite-difference roundoff does not swamp small parameter gradients.
    """
    rng = make_rng(seed)
    m = net.init_model(net.ArchDescriptor(tuple(widths), 3, fusion), seed + 1, dtype=np.float64)
    image = rng.uniform(-1, 1, (batch, 3, size, size))
    raster = (rng.random((batch, 3, size, size)) < 0.3).astype(np.float64)
    out = net.forward(m, image, raster)
    disp_t = out.disp + rng.normal(scale=0.5, size=out.disp.shape)
    seg_t = (rng.random(out.seg_logits.shape) < 0.5).astype(np.float64)
    fn = total_loss_fn(disp_t, seg_t, seg_weight)
    return net.finite_diff_check(m, (image, raster), fn, epsilon, n_coords, seed)
