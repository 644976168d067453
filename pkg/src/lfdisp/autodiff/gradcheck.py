"""Central finite-difference comparison against analytic gradients."""
from typing import Callable, Optional

import numpy as np

from .tensor import Graph, Tensor, backward


def grad_check(loss_fn: Callable[[], Tensor], graph: Graph, name: str, epsilon: float = 1e-5,
               samples: Optional[int] = 16, rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and numeric ``d loss / d param``.

    ``loss_fn`` must rebuild the forward pass from the graph's current
    parameter values. Up to ``samples`` entries are probed (all of them if
    ``samples`` is None). The relative error of one entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    param = graph[name]
    if param.dtype != np.float64:
        raise TypeError("grad_check requires float64 parameters; float32 rounding swamps the check")
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    rng = rng if rng is not None else np.random.default_rng(0)
    analytic = backward(graph, loss_fn())[name].copy()
    flat = param.data.reshape(-1)
    if samples is None or samples >= flat.size:
        idx = np.arange(flat.size)
    else:
        idx = rng.choice(flat.size, size=samples, replace=False)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + epsilon
        plus = float(loss_fn().data.reshape(-1)[0])
        flat[i] = orig - epsilon
        minus = float(loss_fn().data.reshape(-1)[0])
        flat[i] = orig
        numeric = (plus - minus) / (2 * epsilon)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
