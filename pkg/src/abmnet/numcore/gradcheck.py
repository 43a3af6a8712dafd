"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    num_coords: int = 50,
    rng: np.random.Generator | None = None,
    exclude: Callable[[str, tuple[int, ...]], bool] | None = None,
    denom_floor: float = 1e-3,
) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` must rebuild its graph from the live ``params`` on every
    call and return a scalar. Coordinates are sampled at random across all
    parameters; ``exclude`` may veto coordinates (e.g. near a ReLU kink).
    Run in float64 for meaningful tolerances.

    The error for one coordinate is |analytic - numeric| divided by
    max(|analytic|, |numeric|, ``denom_floor``); the floor turns the check
    absolute for near-zero gradients, where central differences only ever
    return rounding noise (a conv bias feeding train-mode batch norm has a
    true gradient of exactly zero, for example).
    """
    rng = rng or np.random.default_rng(0)

    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
    for p in params.values():
        p.zero_grad()

    flat: list[tuple[str, tuple[int, ...]]] = []
    names = list(params)
    total = sum(params[n].data.size for n in names)
    draws = min(num_coords * 4, total)
    chosen = rng.choice(total, size=draws, replace=False)
    bounds = np.cumsum([params[n].data.size for n in names])
    for c in chosen:
        k = int(np.searchsorted(bounds, c, side="right"))
        local = c - (bounds[k - 1] if k > 0 else 0)
        idx = np.unravel_index(local, params[names[k]].data.shape)
        flat.append((names[k], idx))

    max_rel = 0.0
    tested = 0
    for name, idx in flat:
        if tested >= num_coords:
            break
        if exclude is not None and exclude(name, idx):
            continue
        p = params[name]
        original = p.data[idx]
        p.data[idx] = original + h
        f_plus = float(loss_fn().data)
        p.data[idx] = original - h
        f_minus = float(loss_fn().data)
        p.data[idx] = original
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[name][idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
        max_rel = max(max_rel, rel)
        tested += 1
    return max_rel
