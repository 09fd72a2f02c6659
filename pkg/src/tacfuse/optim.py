"""AdamW with decoupled weight decay and per-group learning rates.

Parameter groups are assigned by name prefix: "vis." is the visual
backbone group, "tac." / "tacdec." the tactile group, everything else
the default group. Decay multiplies the weight directly and is never
folded into the gradient.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .autodiff import Tensor


class NonFiniteGradError(RuntimeError):
    """A gradient contained NaN/Inf; the whole step is rejected."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient for parameter '{param_name}'; step rejected")
        self.param_name = param_name


def group_of(name: str) -> str:
    if name.startswith("vis."):
        return "backbone"
    if name.startswith(("tac.", "tacdec.")):
        return "tactile"
    return "default"


@dataclasses.dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    lr_map: dict[str, float]
    weight_decay: float

    @classmethod
    def init(cls, params: dict[str, Tensor], lr: float, lr_backbone: float,
             lr_tactile: float, weight_decay: float) -> "OptimState":
        zeros = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(
            m=zeros,
            v={k: z.copy() for k, z in zeros.items()},
            step=0,
            lr_map={"default": lr, "backbone": lr_backbone, "tactile": lr_tactile},
            weight_decay=weight_decay,
        )


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimState:
    """One AdamW update over every parameter present in `grads`.

    Parameters without a gradient this step are left untouched (no decay
    either), so frozen or unused weights survive checkpoint comparisons.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradError(name)
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    sb2 = np.sqrt(1.0 - beta2 ** t)
    scratch: dict[tuple, np.ndarray] = {}
    for name, g in grads.items():
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        key = (g.shape, g.dtype)
        s = scratch.get(key)
        if s is None:
            s = scratch[key] = np.empty_like(g)
        np.multiply(g, g, out=s)
        v *= beta2
        s *= 1.0 - beta2
        v += s
        m *= beta1
        np.multiply(g, 1.0 - beta1, out=s)
        m += s
        lr = state.lr_map[group_of(name)]
        # mhat/(sqrt(vhat)+eps) == m*sb2/(bc1*(sqrt(v)+eps*sb2))
        np.sqrt(v, out=s)
        s += eps * sb2
        np.divide(m, s, out=s)
        s *= lr * sb2 / bc1
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= s
    return state


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.grad for k, p in params.items() if p.grad is not None}


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
