from __future__ import annotations

from collections.abc import Callable, Mapping

import numpy as np

from ..exceptions import NumericError
from .params import ParamSet
from .tensor import Tensor


def analytic_grads(function: Callable[[dict], Tensor], params: Mapping) -> tuple[float, ParamSet]:
    tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}
    loss = function(tensors)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"loss is not finite: {value}")
    loss.backward()
    grads = ParamSet()
    for k, t in tensors.items():
        grads[k] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return value, grads


def numeric_grads(
    function: Callable[[dict], Tensor],
    params: Mapping,
    epsilon: float = 1e-5,
    indices: Mapping | None = None,
) -> ParamSet:
    """Central finite differences ``(f(p+eps) - f(p-eps)) / 2eps``.

    Every element is differenced unless ``indices`` maps a parameter name to
    the flat positions to probe; unprobed entries are left at zero.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def f() -> float:
        value = float(function({k: Tensor(v) for k, v in base.items()}).data)
        if not np.isfinite(value):
            raise NumericError(f"loss is not finite during finite differencing: {value}")
        return value

    out = ParamSet()
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        probe = range(flat.size) if indices is None else indices[name]
        for i in probe:
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = f()
            flat[i] = orig - epsilon
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * epsilon)
        out[name] = g
    return out


def relative_errors(analytic: ParamSet, numeric: ParamSet, floor: float = 1e-6) -> dict[str, float]:
    """Per-parameter ``|a - n| / max(|a|, |n|, floor)`` using L2 norms over the tensor."""
    errs = {}
    for k in analytic:
        a, n = analytic[k], numeric[k]
        scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
        errs[k] = float(np.linalg.norm(a - n) / scale)
    return errs


def grad_check(
    function: Callable[[dict], Tensor],
    params: Mapping,
    epsilon: float = 1e-5,
    floor: float = 1e-6,
    samples: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between backprop and central differences.

    ``function`` maps a dict of named tensors to a scalar tensor. The error
    is computed per named parameter on whole-tensor L2 norms, so individual
    near-zero gradient entries do not dominate; ``floor`` bounds the
    denominator for parameters whose true gradient is ~0.

    With ``samples`` set, only that many seeded random entries per parameter
    are differenced and compared, which keeps wide layers affordable.
    """
    _, analytic = analytic_grads(function, params)
    indices = None
    if samples is not None:
        rng = np.random.default_rng(seed)
        indices = {}
        for k, v in params.items():
            size = int(np.size(v))
            indices[k] = np.sort(rng.choice(size, size=min(samples, size), replace=False))
    numeric = numeric_grads(function, params, epsilon, indices)
    if indices is not None:
        analytic = ParamSet((k, np.asarray(analytic[k]).reshape(-1)[indices[k]]) for k in analytic)
        numeric = ParamSet((k, np.asarray(numeric[k]).reshape(-1)[indices[k]]) for k in numeric)
    errs = relative_errors(analytic, numeric, floor)
    return max(errs.values()) if errs else 0.0
