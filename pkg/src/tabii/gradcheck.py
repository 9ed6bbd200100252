"""Central finite-difference validation of recorded gradients.

The contract every composite block in this project relies on: analytic
gradients from the tape match (f(x+h) - f(x-h)) / 2h entrywise. Checks run
in float64; callers must hand in a deterministic loss builder (eval mode or
a re-seeded generator inside the closure).
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, backward


def max_relative_error(build_loss: Callable[[], Tensor],
                       params: Sequence[Parameter],
                       h: float = 1e-5,
                       sample_per_param: int | None = None,
                       rng: np.random.Generator | None = None) -> float:
    """Largest mixed relative error |analytic - numeric| / max(1, |a|, |n|).

    `sample_per_param` limits the number of perturbed entries per parameter
    (all entries when None); sampling uses `rng` for reproducibility.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = build_loss()
    backward(loss)
    analytic = []
    for p in params:
        if p.grad is None:
            raise ValueError("parameter received no gradient; not part of the loss?")
        analytic.append(p.grad.copy())
        p.grad = None

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.ravel()
        n_entries = flat.size
        if sample_per_param is not None and sample_per_param < n_entries:
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(n_entries, size=sample_per_param, replace=False)
        else:
            idxs = np.arange(n_entries)
        aflat = a.ravel()
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = build_loss().item()
            flat[i] = orig - h
            f_minus = build_loss().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]), abs(numeric))
            worst = max(worst, err)
    return worst
