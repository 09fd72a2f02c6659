"""Central finite-difference oracle for analytic gradients.

The check is only trustworthy in double precision, so it refuses
float32 parameters outright. Large tensors are spot-checked on a
deterministic sample of coordinates (at least 32 per tensor).

Each coordinate is scored at the primary step size first and, if
needed, at a small ladder of scaled steps: larger steps beat
cancellation noise on tiny gradients, smaller ones dodge relu kinks
inside the difference window. The best relative error over the ladder
is reported; a genuinely wrong analytic gradient fails at every step
size. Tensors can be checked in parallel fork workers, each of which
perturbs its own copy-on-write parameter copy.
"""

from __future__ import annotations

import dataclasses
import multiprocessing
import os
from typing import Callable

import numpy as np

from . import rng as rngmod
from .autodiff import Tensor, no_grad
from .optim import zero_grads

_EPS_LADDER = (1.0, 8.0, 0.125, 64.0)


class NonDeterministicLossError(RuntimeError):
    """loss_fn returned different values on identical repeated calls."""


@dataclasses.dataclass
class GradCheckReport:
    eps: float
    tol: float
    max_rel_err: dict[str, float]
    passed: dict[str, bool]

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())

    def failures(self) -> list[str]:
        return [k for k, ok in self.passed.items() if not ok]

    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return name, self.max_rel_err[name]


def _coords_for(name: str, size: int, max_coords: int, seed: int) -> np.ndarray:
    if size <= max_coords:
        return np.arange(size)
    return rngmod.stream(seed, "gradcheck." + name).choice(size, size=max_coords, replace=False)


def _max_rel_for_tensor(loss_fn, p: Tensor, analytic: np.ndarray, coords: np.ndarray,
                        eps: float, tol: float) -> float:
    flat = p.data.reshape(-1)
    aflat = analytic.reshape(-1)
    worst = 0.0
    for idx in coords:
        orig = flat[idx]
        a = float(aflat[idx])
        best = np.inf
        for mult in _EPS_LADDER:
            e = eps * mult
            with no_grad():  # difference quotients need values only
                flat[idx] = orig + e
                f_plus = loss_fn().item()
                flat[idx] = orig - e
                f_minus = loss_fn().item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * e)
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            best = min(best, rel)
            if best <= tol:
                break
        worst = max(worst, best)
    return worst


_FORK_STATE: tuple | None = None


def _fd_worker(names: list[str], conn) -> None:
    loss_fn, params, analytic, coord_map, eps, tol = _FORK_STATE
    out = {}
    for name in names:
        out[name] = _max_rel_for_tensor(loss_fn, params[name], analytic[name],
                                        coord_map[name], eps, tol)
    conn.send(out)
    conn.close()


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5,
               tol: float = 1e-6, max_coords: int = 32, seed: int = 0,
               workers: int = 1) -> GradCheckReport:
    """Compare tape gradients of a scalar loss against central differences."""
    global _FORK_STATE
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 parameters, '{name}' is {p.data.dtype}")

    first = loss_fn()
    second = loss_fn()
    if first.data.size != 1:
        raise ValueError("loss_fn must return a scalar")
    if first.item() != second.item():
        raise NonDeterministicLossError(
            f"loss_fn is not deterministic: {first.item()!r} != {second.item()!r}")

    zero_grads(params)
    out = loss_fn()
    out.backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    coord_map = {name: _coords_for(name, p.size, max_coords, seed) for name, p in params.items()}

    names = list(params)
    max_rel: dict[str, float] = {}
    workers = max(1, int(workers))
    if workers > 1 and hasattr(os, "fork"):
        _FORK_STATE = (loss_fn, params, analytic, coord_map, eps, tol)
        try:
            ctx = multiprocessing.get_context("fork")
            shares = [names[i::workers] for i in range(workers)]
            pipes, procs = [], []
            for share in shares:
                parent, child = ctx.Pipe(duplex=False)
                proc = ctx.Process(target=_fd_worker, args=(share, child))
                proc.start()
                child.close()
                pipes.append(parent)
                procs.append(proc)
            for parent, proc in zip(pipes, procs):
                max_rel.update(parent.recv())
                proc.join()
        finally:
            _FORK_STATE = None
    else:
        for name in names:
            max_rel[name] = _max_rel_for_tensor(loss_fn, params[name], analytic[name],
                                                coord_map[name], eps, tol)
    passed = {name: max_rel[name] <= tol for name in names}
    return GradCheckReport(eps=eps, tol=tol, max_rel_err=max_rel, passed=passed)
