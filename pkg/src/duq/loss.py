"""Training objectives.

``nle`` is the Gaussian negative log-likelihood with the constant dropped:
each cell contributes ``log(var) / 2 + (y - mean)^2 / (2 var)``. Cells are
summed within a sample and averaged over samples, so the gradient scale does
not depend on the batch size. ``mse`` and ``mae`` average over every cell.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LOSS_KINDS = ("nle", "mse", "mae")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else dc.constant(x)


def _check_shapes(*arrays) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"loss operands disagree in shape: {[a.shape for a in arrays]}")


def nle(mean, variance, y, n_samples: int | None = None) -> Tensor:
    """Gaussian negative log-likelihood (constant omitted).

    Args:
        mean, variance, y: same-shaped tensors or arrays.
        n_samples: number of samples the cells belong to; defaults to the
            leading extent (or 1 for 0-d/1-d input).
    """
    mean, variance, y = _as_tensor(mean), _as_tensor(variance), _as_tensor(y)
    _check_shapes(mean, variance, y)
    if np.any(variance.data <= 0):
        raise ValueError("nle needs a strictly positive variance")
    if n_samples is None:
        n_samples = mean.shape[0] if mean.ndim >= 2 else 1
    per_cell = 0.5 * dc.log(variance) + dc.square(y - mean) / (2.0 * variance)
    return dc.sum(per_cell) / float(n_samples)


def mse(mean, y) -> Tensor:
    mean, y = _as_tensor(mean), _as_tensor(y)
    _check_shapes(mean, y)
    return dc.mean(dc.square(mean - y))


def mae(mean, y) -> Tensor:
    mean, y = _as_tensor(mean), _as_tensor(y)
    _check_shapes(mean, y)
    return dc.mean(dc.absolute(mean - y))


def compute(kind: str, mean, variance, y, n_samples: int | None = None) -> Tensor:
    if kind == "nle":
        return nle(mean, variance, y, n_samples)
    if kind == "mse":
        return mse(mean, y)
    if kind == "mae":
        return mae(mean, y)
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
