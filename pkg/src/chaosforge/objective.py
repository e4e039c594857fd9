"""Training objective: pointwise error, router load balance, and a kernel
two-sample term that pulls predicted windows toward the target distribution.

All three parts build tensor graphs, so gradients flow whenever the inputs
are on a tape; plain arrays work too and give plain scalar tensors.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor
from .util import DataError, NumericalError


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise DataError("loss weights must be nonnegative")


@dataclass(frozen=True)
class KernelMixture:
    sigmas: tuple = (0.2, 0.5, 0.9, 1.3)

    def __post_init__(self):
        if not self.sigmas or any(s <= 0 for s in self.sigmas):
            raise DataError("kernel scales must be positive")


def _as_tensor(x):
    return x if isinstance(x, tensor.Tensor) else tensor.constant(np.asarray(x, dtype=np.float64))


def mse_loss(pred, true):
    """(1/B) sum over batch of the squared error summed over all H*V entries."""
    pred, true = _as_tensor(pred), _as_tensor(true)
    if pred.data.shape != true.data.shape or pred.data.ndim != 3:
        raise DataError(
            f"mse_loss expects matching (B, H, V) batches, got {pred.data.shape} vs {true.data.shape}"
        )
    B, H, V = pred.data.shape
    diff = tensor.sub(pred, true)
    return tensor.scale(tensor.mean_all(tensor.mul(diff, diff)), float(H * V))


def balance_loss(f, r):
    """M * sum_i f_i r_i over routing fractions f and mean router scores r.

    f is a constant statistic (top-K membership is not differentiable); r may
    be a tensor, in which case the gradient flows into the router.
    """
    f = np.asarray(f, dtype=np.float64)
    r_t = _as_tensor(r)
    if f.ndim != 1 or r_t.data.shape != f.shape:
        raise DataError("balance_loss expects matching 1-D f and r")
    if np.any(f < -1e-9) or np.any(f > 1 + 1e-9):
        raise DataError("routing fractions must lie in [0, 1]")
    total = float(f.sum())
    if abs(total - round(total)) > 1e-6 or round(total) < 1:
        raise DataError(f"routing fractions must sum to the active-expert count, got {total}")
    r_np = r_t.data
    if np.any(r_np < -1e-9) or abs(float(r_np.sum()) - 1.0) > 1e-8:
        raise DataError("mean router scores must form a probability vector")
    M = f.shape[0]
    return tensor.scale(tensor.sum_over_axis(tensor.mul(tensor.constant(f), r_t), 0), float(M))


def balance_from_stats(stats):
    """Average (f, r) over the step's MoE layers, then apply balance_loss."""
    if not stats:
        raise DataError("no routing statistics collected")
    f_mean = np.mean(np.stack([s["f"] for s in stats]), axis=0)
    acc = stats[0]["r"]
    for s in stats[1:]:
        acc = tensor.add(acc, s["r"])
    r_mean = tensor.scale(acc, 1.0 / len(stats))
    return balance_loss(f_mean, r_mean)


def _pairwise_sq_dists(u, v):
    B = u.data.shape[0]
    D = u.data.shape[1]
    left = tensor.reshape(u, (B, 1, D))
    right = tensor.reshape(v, (1, B, D))
    diff = tensor.sub(left, right)
    return tensor.sum_over_axis(tensor.mul(diff, diff), -1)


def _kernel_mean(d2, sigmas):
    # mean over all pairs of sum_sigma sigma^2 / (sigma^2 + ||u-v||^2)
    acc = None
    for s in sigmas:
        s2 = float(s) * float(s)
        term = tensor.scale(tensor.power(tensor.shift(d2, s2), -1.0), s2)
        acc = term if acc is None else tensor.add(acc, term)
    return tensor.mean_all(acc)


def mmd2_loss(pred, true, kernel=None):
    """Squared maximum mean discrepancy between two window batches.

    Windows are flattened to H*V vectors; the kernel is a rational-quadratic
    mixture. V-statistic form: identical batches give exactly zero.
    """
    kernel = kernel or KernelMixture()
    pred, true = _as_tensor(pred), _as_tensor(true)
    if pred.data.shape != true.data.shape or pred.data.ndim != 3:
        raise DataError(
            f"mmd2_loss expects matching (B, H, V) batches, got {pred.data.shape} vs {true.data.shape}"
        )
    B, H, V = pred.data.shape
    p = tensor.reshape(pred, (B, H * V))
    t = tensor.reshape(true, (B, H * V))
    k_pp = _kernel_mean(_pairwise_sq_dists(p, p), kernel.sigmas)
    k_tt = _kernel_mean(_pairwise_sq_dists(t, t), kernel.sigmas)
    k_pt = _kernel_mean(_pairwise_sq_dists(p, t), kernel.sigmas)
    return tensor.add(tensor.add(k_pp, k_tt), tensor.scale(k_pt, -2.0))


def composite_loss(mse, balance, mmd2, weights=None):
    """mse + lambda1 * balance + lambda2 * mmd2."""
    weights = weights or LossWeights()
    parts = [_as_tensor(x) for x in (mse, balance, mmd2)]
    for part in parts:
        if not np.all(np.isfinite(part.data)):
            raise NumericalError("non-finite loss component")
    mse_t, bal_t, mmd_t = parts
    return tensor.add(
        mse_t,
        tensor.add(
            tensor.scale(bal_t, weights.lambda1), tensor.scale(mmd_t, weights.lambda2)
        ),
    )
