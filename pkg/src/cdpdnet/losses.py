from __future__ import annotations

import torch
import torch.nn.functional as F


def masked_loss(logits, target, mask, alpha=1.0, beta=1.0, smooth=1e-5):
    """Dice + binary cross-entropy over the channels each item's task annotates.

    ``logits``/``target`` are ``(B, |L|, ...)``; ``mask`` is ``(|L|,)`` or
    ``(B, |L|)`` boolean. Absent channels are never read, so neither the loss
    nor any gradient depends on their targets.

    Returns ``(total, terms)`` where ``terms`` holds the Dice and CE parts and
    the per-(item, channel) values for the present entries.
    """
    if logits.shape != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    b, c = logits.shape[:2]
    mask = torch.as_tensor(mask, dtype=torch.bool, device=logits.device)
    if mask.dim() == 1:
        mask = mask.expand(b, c)
    if mask.shape != (b, c):
        raise ValueError(f"mask {tuple(mask.shape)} does not match (B, |L|) = ({b}, {c})")
    if not mask.any(1).all():
        raise ValueError("every item must supervise at least one channel")
    bi, ci = mask.nonzero(as_tuple=True)
    lg = logits.reshape(b, c, -1)[bi, ci]
    tg = target.reshape(b, c, -1)[bi, ci].to(lg.dtype)
    p = torch.sigmoid(lg)
    dice = 1.0 - (2.0 * (p * tg).sum(-1) + smooth) / (p.sum(-1) + tg.sum(-1) + smooth)
    ce = F.binary_cross_entropy_with_logits(lg, tg, reduction="none").mean(-1)
    dice_term, ce_term = dice.mean(), ce.mean()
    total = alpha * dice_term + beta * ce_term
    return total, {"dice_term": dice_term, "ce_term": ce_term, "dice": dice, "ce": ce,
                   "items": bi, "channels": ci}
