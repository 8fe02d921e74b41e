"""Dual-supervised mapping losses and the combined training objective."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import DEFAULT_LAMBDA
from .numerics import cosine_rows

NORM_EPS = 1e-8


class EmptyBatchError(ValueError):
    pass


@dataclass
class LossBundle:
    l_v2t: torch.Tensor
    l_t2v: torch.Tensor
    l_ce: torch.Tensor
    l_total: torch.Tensor
    lam: float = DEFAULT_LAMBDA

    def as_record(self, step: int) -> dict:
        return {
            "step": int(step),
            "l_ce": float(self.l_ce),
            "l_v2t": float(self.l_v2t),
            "l_t2v": float(self.l_t2v),
            "l_total": float(self.l_total),
        }


def cosine_loss(target: torch.Tensor, rebuilt: torch.Tensor) -> torch.Tensor:
    """``1 - mean_t cos(target_t, rebuilt_t)`` with the norm epsilon."""
    if target.shape[0] == 0:
        raise EmptyBatchError("cosine loss over zero tokens")
    return 1.0 - cosine_rows(target, rebuilt, eps=NORM_EPS).mean()


def loss_v2t(e_txt: torch.Tensor, v_f_txt: torch.Tensor, mlp_v2t) -> torch.Tensor:
    """Text rebuilt from its vision-space encoding vs. the LLM text embedding."""
    if e_txt.shape[0] == 0:
        raise EmptyBatchError("no text tokens to reconstruct")
    return cosine_loss(e_txt, mlp_v2t(v_f_txt))


def loss_t2v(e_img: torch.Tensor, v_img: torch.Tensor, mlp_t2v) -> torch.Tensor:
    """Image rebuilt from its text-space mapping vs. the raw vision embedding."""
    if e_img.shape[0] == 0:
        raise EmptyBatchError("no image tokens to reconstruct")
    return cosine_loss(v_img, mlp_t2v(e_img))


def loss_ce(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any()):
        raise EmptyBatchError("no supervised positions")
    logits = logits[mask]
    targets = torch.as_tensor(targets)[mask]
    shifted = logits - logits.amax(dim=-1, keepdim=True).detach()
    log_probs = shifted - torch.log(torch.exp(shifted).sum(-1, keepdim=True))
    return -log_probs.gather(-1, targets[:, None]).mean()


def loss_total(l_ce, l_v2t, l_t2v, lam: float = DEFAULT_LAMBDA) -> LossBundle:
    total = l_ce + lam * (l_v2t + l_t2v)
    return LossBundle(l_v2t=l_v2t, l_t2v=l_t2v, l_ce=l_ce, l_total=total, lam=lam)
