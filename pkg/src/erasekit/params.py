"""Deterministic parameter initialization and gradient verification.

Module parameters are (re)initialized from an explicit numpy Generator so
model construction never depends on torch's global RNG; identical seeds
give identical weights on any host.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn


def deterministic_init_(
    module: nn.Module,
    rng: np.random.Generator,
    zero_prefixes: Sequence[str] = (),
) -> None:
    """Fill parameters with uniform(-1/sqrt(fan_in), +) draws from rng.

    Normalization weights are set to 1, every other 1-D parameter (biases)
    to 0. Parameters whose name starts with one of zero_prefixes are
    zeroed, which keeps zero-initialized output projections at zero.
    """
    with torch.no_grad():
        for name, param in module.named_parameters():
            if any(name.startswith(prefix) for prefix in zero_prefixes):
                param.zero_()
            elif param.dim() >= 2:
                fan_in = int(np.prod(param.shape[1:]))
                bound = math.sqrt(1.0 / fan_in)
                values = rng.uniform(-bound, bound, size=tuple(param.shape))
                param.copy_(torch.as_tensor(values, dtype=param.dtype))
            elif "norm" in name.lower() and name.endswith("weight"):
                param.fill_(1.0)
            else:
                param.zero_()


def sample_parameter_coords(
    modules: Sequence[nn.Module], n: int, rng: np.random.Generator
) -> list[tuple[int, str, tuple[int, ...]]]:
    """Pick n random (module index, parameter name, flat coordinate) triples."""
    index = []
    for mi, module in enumerate(modules):
        for name, param in module.named_parameters():
            index.append((mi, name, param))
    coords = []
    for _ in range(n):
        mi, name, param = index[int(rng.integers(0, len(index)))]
        flat = int(rng.integers(0, param.numel()))
        coords.append((mi, name, np.unravel_index(flat, tuple(param.shape))))
    return coords


def central_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    modules: Sequence[nn.Module],
    coords: Sequence[tuple[int, str, tuple[int, ...]]],
    step: float = 1e-6,
    atol: float = 1e-6,
) -> list[dict]:
    """Compare analytic gradients against central finite differences.

    loss_fn must rebuild the loss from scratch on every call (the modules
    are perturbed in place between calls). Returns one record per
    coordinate with the analytic value, numerical value, and relative
    error. Intended for float64 modules.

    The relative-error denominator is floored at atol: differencing a
    float64 loss leaves ~1e-11 cancellation noise, so gradients that are
    mathematically zero (softmax shift invariance and the like) are
    compared at the atol scale instead of against that noise.
    """
    params = [dict(m.named_parameters()) for m in modules]
    for module in modules:
        module.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    records = []
    for mi, name, idx in coords:
        param = params[mi][name]
        analytic = float(param.grad[idx]) if param.grad is not None else 0.0
        with torch.no_grad():
            original = float(param[idx])
            h = step * max(1.0, abs(original))
            param[idx] = original + h
        plus = float(loss_fn().detach())
        with torch.no_grad():
            param[idx] = original - h
        minus = float(loss_fn().detach())
        with torch.no_grad():
            param[idx] = original
        numeric = (plus - minus) / (2.0 * h)
        denom = max(abs(analytic), abs(numeric), atol)
        records.append(
            {
                "name": name,
                "index": tuple(int(i) for i in idx),
                "analytic": analytic,
                "numeric": numeric,
                "rel_error": abs(analytic - numeric) / denom,
            }
        )
    return records
