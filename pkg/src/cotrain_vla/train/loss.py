"""Cross entropy over text and FAST targets plus the weighted flow regression term."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..model.sequence import Batch


@dataclass
class LossTerms:
    total: torch.Tensor
    ce: torch.Tensor
    flow: torch.Tensor


def flow_term(ya: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over H x d_max for the examples that carry a flow sample."""
    if not bool(mask.any()):
        return ya.sum() * 0.0
    err = (ya - target).pow(2).mean(dim=(1, 2))
    return err[mask].mean()


def combined_loss(model, batch: Batch, alpha: float, outputs=None) -> LossTerms:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    has_flow = batch.has_noisy and bool(batch.flow_mask.any())
    if alpha > 0 and not has_flow:
        raise ValueError("alpha > 0 but the batch holds no flow samples")
    logits, ya = model(batch) if outputs is None else outputs
    if len(batch.labels):
        ce = F.cross_entropy(logits, batch.labels)
    else:
        ce = logits.sum() * 0.0
    if has_flow and ya is not None:
        flow = flow_term(ya, batch.flow_target, batch.flow_mask)
    else:
        flow = ce * 0.0
    return LossTerms(total=ce + alpha * flow, ce=ce, flow=flow)
