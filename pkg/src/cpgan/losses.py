"""Adversarial, anti-shortcut, grounded-fake and auxiliary mask losses.

Every loss accepts python floats, numpy arrays or torch tensors. Batched
inputs are averaged over the batch; scalar inputs give scalar outputs.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch

from .errors import ContractError

EPS = 1e-7
AUX_WEIGHT = 0.1
REAL_LABEL = 0.75


def _as_tensor(x) -> tuple[torch.Tensor, bool]:
    if torch.is_tensor(x):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _out(t: torch.Tensor, plain: bool):
    return float(t) if plain and t.dim() == 0 else (t.numpy() if plain else t)


def _bce(p: torch.Tensor, label) -> torch.Tensor:
    p = p.clamp(EPS, 1.0 - EPS)
    return -label * torch.log(p) - (1.0 - label) * torch.log1p(-p)


def bce(prediction, label):
    """Element-wise cross entropy ``-l ln p - (1 - l) ln(1 - p)``, p clamped to [eps, 1 - eps]."""
    p, plain = _as_tensor(prediction)
    lab = label if torch.is_tensor(label) else torch.as_tensor(np.asarray(label, dtype=np.float64), dtype=p.dtype)
    return _out(_bce(p, lab), plain and not torch.is_tensor(label))


def _mean_bce(score, label):
    s, plain = _as_tensor(score)
    return _out(_bce(s, label).mean(), plain)


def d_real_loss(score):
    """Real images are scored against the smoothed label 0.75."""
    return _mean_bce(score, REAL_LABEL)


def d_fake_loss(score):
    return _mean_bce(score, 0.0)


def g_fake_loss(score, non_saturating: bool = False):
    """Negated discriminator fake loss, or ``bce(score, 1)`` in non-saturating mode."""
    if non_saturating:
        return _mean_bce(score, 1.0)
    return -d_fake_loss(score)


def g_anti_shortcut_loss(score):
    """The generator wants the irrelevant-image composite judged fake."""
    return _mean_bce(score, 0.0)


d_grounded_fake_loss = d_fake_loss


def _per_sample_mean(x: torch.Tensor) -> torch.Tensor:
    if x.dim() <= 2:
        return x.mean()
    return x.flatten(1).mean(dim=1)


def mask_loss(predicted, target):
    """Complement-invariant pixel-wise cross entropy.

    ``min(mean bce(pred, t), mean bce(pred, 1 - t))`` per mask; (H, W) inputs
    give a scalar, batched inputs (N, ...) are reduced per sample and then
    averaged over the batch.
    """
    p, plain = _as_tensor(predicted)
    t = target if torch.is_tensor(target) else torch.as_tensor(np.asarray(target, dtype=np.float64), dtype=p.dtype)
    if p.shape != t.shape:
        raise ContractError(f"predicted mask {tuple(p.shape)} and target {tuple(t.shape)} differ")
    direct = _per_sample_mean(_bce(p, t))
    flipped = _per_sample_mean(_bce(p, 1.0 - t))
    return _out(torch.minimum(direct, flipped).mean(), plain)


@dataclass
class LossBundle:
    d_real: torch.Tensor
    d_fake: torch.Tensor
    d_grounded_fake: torch.Tensor
    g_fake: torch.Tensor
    g_anti_shortcut: torch.Tensor
    mask_real: torch.Tensor
    mask_fake: torch.Tensor
    mask_anti_shortcut: torch.Tensor
    mask_grounded_fake: torch.Tensor
    g_total: torch.Tensor
    d_total: torch.Tensor
    aux_weight: float = AUX_WEIGHT

    @property
    def aux(self) -> torch.Tensor:
        return self.mask_real + self.mask_fake + self.mask_anti_shortcut + self.mask_grounded_fake

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self) if f.name != "aux_weight"}


LOSS_NAMES = (
    "d_real", "d_fake", "d_grounded_fake", "g_fake", "g_anti_shortcut",
    "mask_real", "mask_fake", "mask_anti_shortcut", "mask_grounded_fake", "g_total", "d_total",
)


def assemble_losses(
    scores: dict,
    mask_preds: dict | None = None,
    gen_mask=None,
    grounded_mask=None,
    aux_weight: float = AUX_WEIGHT,
    non_saturating: bool = False,
) -> LossBundle:
    """Combine branch outputs into a :class:`LossBundle`.

    ``scores`` maps branch name (``real``, ``fake``, ``anti_shortcut``,
    ``grounded_fake``) to discriminator realness; ``mask_preds`` maps the
    same names to discriminator mask estimates. Absent branches contribute
    exactly zero. The real branch's mask target is the empty mask, the fake
    and anti-shortcut targets are ``gen_mask`` and the grounded-fake target
    is ``grounded_mask``.
    """
    mask_preds = mask_preds or {}
    ref = next(iter(scores.values())) if scores else next(iter(mask_preds.values()))
    ref_t = ref if torch.is_tensor(ref) else torch.as_tensor(np.asarray(ref, dtype=np.float64))
    zero = torch.zeros((), dtype=ref_t.dtype)

    def branch(fn, key):
        return fn(_as_tensor(scores[key])[0]) if key in scores else zero

    d_real = branch(d_real_loss, "real")
    d_fake = branch(d_fake_loss, "fake")
    d_gf = branch(d_fake_loss, "grounded_fake")
    g_fake = branch(lambda s: g_fake_loss(s, non_saturating), "fake")
    g_anti = branch(g_anti_shortcut_loss, "anti_shortcut")

    def mloss(key, target):
        if key not in mask_preds:
            return zero
        pred = _as_tensor(mask_preds[key])[0]
        tgt = torch.zeros_like(pred) if target is None else _as_tensor(target)[0].to(pred.dtype)
        return mask_loss(pred, tgt)

    m_real = mloss("real", None)
    m_fake = mloss("fake", gen_mask)
    m_anti = mloss("anti_shortcut", gen_mask)
    m_gf = mloss("grounded_fake", grounded_mask)

    aux = m_real + m_fake + m_anti + m_gf
    return LossBundle(
        d_real=d_real, d_fake=d_fake, d_grounded_fake=d_gf, g_fake=g_fake, g_anti_shortcut=g_anti,
        mask_real=m_real, mask_fake=m_fake, mask_anti_shortcut=m_anti, mask_grounded_fake=m_gf,
        g_total=g_fake + g_anti, d_total=d_real + d_fake + d_gf + aux_weight * aux, aux_weight=aux_weight,
    )
