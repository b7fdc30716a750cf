"""Central finite-difference checks against the tape gradients."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from ..errors import InvalidArgument
from .tensor import Parameter, Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


def _scalar(out: Tensor) -> float:
    if out.data.size != 1:
        raise InvalidArgument(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    return float(out.data.reshape(()))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between backward() and central differences of ``f`` at ``x``."""
    if step <= 0:
        raise InvalidArgument("step must be positive")
    x = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
    out = f(x)
    _scalar(out)
    backward(out, [x])
    analytic = x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar(f(x))
            flat[i] = orig - step
            fm = _scalar(f(x))
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
    return float(relative_error(analytic, numeric).max()) if analytic.size else 0.0


def grad_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Parameter],
                      step: float = 1e-5, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> dict[str, float]:
    """Per-parameter max relative error for a scalar loss over model parameters.

    ``loss_fn`` must rebuild the forward pass from the current parameter
    values and be deterministic. With ``max_coords`` only that many randomly
    chosen coordinates per parameter are perturbed.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    _scalar(loss)
    backward(loss, params)
    rng = rng or np.random.default_rng(0)
    report: dict[str, float] = {}
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            analytic = p.grad.reshape(-1)[coords]
            numeric = np.empty(len(coords))
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + step
                fp = _scalar(loss_fn())
                flat[i] = orig - step
                fm = _scalar(loss_fn())
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * step)
            report[p.name] = float(relative_error(analytic, numeric).max()) if len(coords) else 0.0
    return report
