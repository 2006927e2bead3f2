"""Named parameter store and Adam with an exponential learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, parameter


@dataclass
class DecaySchedule:
    """Exponential decay from ``start`` to ``end`` over ``horizon`` iterations.

    Unclamped past the horizon: lr(i) = start * (end/start)**(i/horizon).
    """
    start: float
    end: float
    horizon: int

    def rate_at(self, iteration: int) -> float:
        return self.start * (self.end / self.start) ** (iteration / self.horizon)


@dataclass
class AdamHyper:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay: DecaySchedule | None = None

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1/beta2 must be in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def rate_at(self, iteration: int) -> float:
        if self.decay is None:
            return self.learning_rate
        return self.decay.rate_at(iteration)


@dataclass
class _Slot:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """Named trainable tensors plus per-entry Adam moments.

    ``lr_scale`` lets groups train at a fraction of the global rate
    (camera offsets use 0.1).
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.slots: dict[str, _Slot] = {}
        self.lr_scales: dict[str, float] = {}

    def add(self, name: str, value: np.ndarray, lr_scale: float = 1.0) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = parameter(np.array(value, copy=True))
        self.params[name] = t
        self.slots[name] = _Slot(np.zeros_like(t.data), np.zeros_like(t.data))
        self.lr_scales[name] = lr_scale
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def gradients(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss per entry; zeros for untouched entries."""
        grads = backward(loss)
        out = {}
        for name, p in self.params.items():
            g = grads.get(p)
            out[name] = g if g is not None else np.zeros_like(p.data)
        return out


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], hyper: AdamHyper,
              iteration: int, names: list[str] | None = None) -> None:
    """One Adam update (bias-corrected) at the schedule's rate for ``iteration``.

    Every updated entry must have a gradient in ``grads``; a missing key is an
    error rather than a silent skip.
    """
    lr = hyper.rate_at(iteration)
    for name in (names if names is not None else store.names()):
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        p = store.params[name]
        slot = store.slots[name]
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name!r}")
        slot.step += 1
        t = slot.step
        np.multiply(slot.m, hyper.beta1, out=slot.m)
        slot.m += (1.0 - hyper.beta1) * g
        np.multiply(slot.v, hyper.beta2, out=slot.v)
        slot.v += (1.0 - hyper.beta2) * (g * g)
        m_hat = slot.m / (1.0 - hyper.beta1 ** t)
        v_hat = slot.v / (1.0 - hyper.beta2 ** t)
        p.data -= (lr * store.lr_scales[name]) * m_hat / (np.sqrt(v_hat) + hyper.epsilon)
