"""Adam optimizer with bias correction, plus the learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError


@dataclass
class AdamState:
    """Per-parameter moment buffers and the shared step counter.

    `t` increases by exactly 1 per applied step. `learning_rate` is the rate
    for the NEXT step; training loops overwrite it from a schedule before
    each call to `adam_step`.
    """

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def buffers_for(self, name, shape):
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
        return self.m[name], self.v[name]


def adam_step(params, grads, state, group_of=None):
    """Apply one bias-corrected Adam update in place.

    `params` maps name -> Tensor, `grads` maps name -> ndarray (same shapes).
    A non-finite gradient aborts before any parameter is touched, naming the
    parameter and (when `group_of` is given) its group.
    """
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise ShapeError(f"parameter/gradient name mismatch: {sorted(missing)}")
    for name, g in grads.items():
        if params[name].shape != np.asarray(g).shape:
            raise ShapeError(
                f"gradient shape {np.asarray(g).shape} != parameter shape "
                f"{params[name].shape} for '{name}'"
            )
        if not np.isfinite(g).all():
            group = f" (group {group_of(name)})" if group_of else ""
            raise NumericError(f"non-finite gradient for parameter '{name}'{group}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m, v = state.buffers_for(name, params[name].shape)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        params[name].data -= state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)


@dataclass(frozen=True)
class LrSchedule:
    """`constant` holds `value`; `inverse_sqrt` ramps linearly over `warmup`
    steps to value/sqrt(warmup) and then decays as value/sqrt(step)."""

    kind: str = "constant"
    value: float = 1e-4
    warmup: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "inverse_sqrt"):
            raise ConfigError(f"unknown lr schedule kind '{self.kind}'")
        if self.kind == "inverse_sqrt" and self.warmup < 1:
            raise ConfigError("inverse_sqrt schedule needs warmup >= 1")

    def at(self, step):
        """Learning rate for 1-based step number."""
        if self.kind == "constant":
            return self.value
        step = max(step, 1)
        return self.value * min(step ** -0.5, step * self.warmup ** -1.5)
