"""Sharpness-aware minimization around an arbitrary base optimizer (Adam by default)."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import torch
import torch.nn as nn
from torch.nn.modules.batchnorm import _BatchNorm


class SAM:
    """Two-step update: climb to ``w + rho * g / ||g||``, take the gradient there, step from ``w``.

    ``rho == 0`` never evaluates a second gradient, so the trajectory is exactly
    that of the base optimizer.
    """

    def __init__(self, params: Iterable[nn.Parameter], base_optimizer=torch.optim.Adam, rho: float = 0.05, **kwargs):
        if rho < 0:
            raise ValueError(f"rho must be non-negative, got {rho}")
        self.params = [p for p in params if p.requires_grad]
        self.rho = rho
        self.base_optimizer = base_optimizer(self.params, **kwargs)
        self._backup: list[torch.Tensor] | None = None

    def zero_grad(self) -> None:
        self.base_optimizer.zero_grad(set_to_none=True)

    @torch.no_grad()
    def grad_norm(self) -> torch.Tensor:
        grads = [p.grad.norm(2) for p in self.params if p.grad is not None]
        if not grads:
            return torch.zeros(())
        return torch.norm(torch.stack(grads), 2)

    @torch.no_grad()
    def first_step(self) -> bool:
        """Perturb parameters in place; returns False (and leaves them alone) when there is nothing to do."""
        if self.rho == 0:
            return False
        norm = self.grad_norm()
        if norm == 0 or not torch.isfinite(norm):
            return False
        scale = self.rho / norm
        self._backup = []
        for p in self.params:
            self._backup.append(p.detach().clone())
            if p.grad is not None:
                p.add_(p.grad * scale.to(p.dtype))
        return True

    @torch.no_grad()
    def restore(self) -> None:
        if self._backup is None:
            return
        for p, old in zip(self.params, self._backup):
            p.copy_(old)
        self._backup = None

    def step(self) -> None:
        self.base_optimizer.step()


@contextlib.contextmanager
def frozen_bn_stats(model: nn.Module):
    """Momentum 0 keeps running statistics fixed while a module stays in train mode."""
    saved = []
    modules = model.modules() if isinstance(model, nn.Module) else ()
    for m in modules:
        if isinstance(m, _BatchNorm):
            saved.append((m, m.momentum))
            m.momentum = 0.0
    try:
        yield
    finally:
        for m, mom in saved:
            m.momentum = mom


def sam_update(model: nn.Module | torch.Tensor, batch_loss_fn: Callable[[], torch.Tensor], optimizer: SAM) -> float:
    """One SAM step; returns the loss at the unperturbed point.

    After the call, ``p.grad`` holds the gradient that the base optimizer used,
    i.e. the one taken at the perturbed point.
    """
    optimizer.zero_grad()
    loss = batch_loss_fn()
    loss.backward()
    if optimizer.first_step():
        optimizer.zero_grad()
        with frozen_bn_stats(model):
            batch_loss_fn().backward()
        optimizer.restore()
    optimizer.step()
    return float(loss.detach())
