"""Adam with decoupled weight decay and hyperbolic learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericsError, ShapeError, Tensor


class NonFiniteGradientError(NumericsError):
    """A gradient fed to the optimizer contained NaN or infinity."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.parameter = name


@dataclass
class OptimizerState:
    """Per-parameter Adam accumulators plus the shared step counter.

    The effective learning rate after ``t`` steps is ``lr / (1 + t * lr_decay)``;
    weight decay is decoupled (applied straight to the parameters, outside the
    moment estimates).
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **hyper) -> "OptimizerState":
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state

    def effective_lr(self) -> float:
        return self.lr / (1.0 + self.step_count * self.lr_decay)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray] | None,
    state: OptimizerState,
) -> OptimizerState:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` may be None, in which case each parameter's own ``.grad`` is
    used (missing gradients count as zero).
    """
    lr_t = state.effective_lr()
    t = state.step_count + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr_t * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype, copy=False)
        if state.weight_decay:
            p.data -= (lr_t * state.weight_decay) * p.data
    state.step_count = t
    return state


def xavier_uniform_init(shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Uniform init in +/- sqrt(6 / (fan_in + fan_out)).

    For conv kernels (C_out, C_in, kh, kw) the fans include the receptive
    field; for matrices (out, in) they are the two dims.
    """
    if len(shape) < 2:
        raise ShapeError(f"xavier init needs at least 2 dims, got {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out = shape[0] * receptive
    fan_in = shape[1] * receptive
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)
