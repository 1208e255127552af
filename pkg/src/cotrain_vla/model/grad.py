"""Reverse-mode derivatives of a scalar training loss with respect to every parameter."""

from __future__ import annotations

from typing import Callable

import torch


def backward(model: torch.nn.Module, loss_fn: Callable[[torch.nn.Module], torch.Tensor],
             cotangent: float = 1.0) -> dict[str, torch.Tensor]:
    """Gradients of ``cotangent * loss_fn(model)``, one tensor per named parameter.

    Parameters the loss does not touch get exact zeros rather than None.
    """
    names, params = zip(*model.named_parameters())
    loss = loss_fn(model) * cotangent
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}
