"""Four-branch training objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..charset import PAD, encode
from .config import LossWeights
from .ctc import ctc_nll
from .model import DecodeTrace, target_ids


class NonFiniteLossError(FloatingPointError):
    def __init__(self, branch: str, value: float):
        super().__init__(f"non-finite {branch} loss: {value}")
        self.branch = branch


@dataclass
class LossBreakdown:
    total: torch.Tensor
    ctc: torch.Tensor
    v: torch.Tensor
    s: torch.Tensor
    f: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "ctc", "v", "s", "f")}


def masked_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean token cross-entropy over non-PAD target positions."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                           ignore_index=PAD)


def branch_losses(trace: DecodeTrace, labels) -> dict[str, torch.Tensor]:
    targets = trace.targets
    if targets is None:
        targets = target_ids(labels, trace.steps).to(trace.fused_logits.device)
    zero = trace.fused_logits.new_zeros(())
    out = {
        "ctc": ctc_nll(trace.ctc_log_probs, [encode(s) for s in labels]).mean(),
        "v": masked_cross_entropy(trace.vd_logits, targets),
    }
    if trace.sd_logits is not None:
        out["s"] = masked_cross_entropy(trace.sd_logits, targets)
        out["f"] = masked_cross_entropy(trace.fused_logits, targets)
    else:
        # coupled baseline: the VD head is the final output, there is no SD
        out["s"] = zero
        out["f"] = zero
    return out


def total_loss(trace: DecodeTrace, labels, weights: LossWeights = LossWeights()) -> LossBreakdown:
    parts = branch_losses(trace, labels)
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise NonFiniteLossError(name, float(value))
    total = (weights.ctc * parts["ctc"] + weights.v * parts["v"]
             + weights.s * parts["s"] + weights.f * parts["f"])
    return LossBreakdown(total, parts["ctc"], parts["v"], parts["s"], parts["f"])
