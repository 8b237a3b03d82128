"""Seed selection for the instance-colouring generator, trained as a policy.

The seediness map is a categorical distribution over pixels. During training
a seed is sampled from it (after structured dropout), and the generator's
negative loss for the induced mask is the reward. ``policy_grad_terms``
builds the surrogate losses whose gradients give the REINFORCE estimator
with a learned baseline and an entropy bonus.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError

ENTROPY_WEIGHT = 0.01
CRITIC_WEIGHT = 1.0
DEGENERATE_MASS = 1e-12


def seediness_softmax(logits) -> torch.Tensor:
    """Softmax jointly over all spatial positions of (H, W) or (N, H, W) logits."""
    logits = torch.as_tensor(logits)
    flat = logits.flatten(-2)
    return torch.softmax(flat, dim=-1).view_as(logits)


def dropout_side(height: int, width: int) -> int:
    return max(1, int(round(min(height, width) / 3)))


def _dropout_keep(rng: np.random.Generator, n: int, height: int, width: int) -> np.ndarray:
    side = dropout_side(height, width)
    keep = np.ones((n, height, width))
    ys = rng.integers(0, height - side + 1, size=n)
    xs = rng.integers(0, width - side + 1, size=n)
    for i, (y, x) in enumerate(zip(ys, xs)):
        keep[i, y:y + side, x:x + side] = 0.0
    return keep


def _apply_keep(policy: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    kept = policy * keep
    mass = kept.flatten(-2).sum(-1)
    ok = mass >= DEGENERATE_MASS
    renorm = kept / mass.clamp_min(DEGENERATE_MASS)[..., None, None]
    return torch.where(ok[..., None, None], renorm, policy)


def structured_dropout(policy, rng_seed) -> torch.Tensor:
    """Zero a random square of side ``round(min(H, W) / 3)`` and renormalize.

    Works on (H, W) or (N, H, W) maps (one square per map). If the square
    held (numerically) all of a map's mass, that map is returned unchanged.
    """
    policy = torch.as_tensor(policy)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    batched = policy.dim() == 3
    p = policy if batched else policy.unsqueeze(0)
    keep = torch.as_tensor(_dropout_keep(rng, p.shape[0], *p.shape[-2:]), dtype=p.dtype, device=p.device)
    out = _apply_keep(p, keep)
    return out if batched else out[0]


def entropy(policy) -> torch.Tensor:
    p = torch.as_tensor(policy).flatten(-2)
    # log(1) on empty cells keeps the gradient finite where dropout zeroed the map
    safe_log = torch.log(torch.where(p > 0, p, torch.ones_like(p)))
    return -(p * safe_log).sum(-1)


@dataclass
class SeedDecision:
    seed: torch.Tensor  # (2,) or (N, 2) as (y, x)
    log_prob: torch.Tensor
    policy: torch.Tensor
    value_at_seed: torch.Tensor | None = None


def pick_seed(policy, mode: str = "sample", rng_seed=None, value=None) -> SeedDecision:
    """Choose a seed pixel from a (H, W) or (N, H, W) probability map.

    ``sample`` draws from the categorical distribution; ``argmax`` takes the
    most probable pixel (first in row-major order on ties). ``log_prob``
    stays differentiable w.r.t. ``policy``; ``value`` (same spatial shape)
    is read out at the chosen seed when given.
    """
    policy = torch.as_tensor(policy)
    batched = policy.dim() == 3
    p = policy if batched else policy.unsqueeze(0)
    n, h, w = p.shape
    flat = p.flatten(1)
    mass = flat.detach().sum(1)
    if (mass <= 0).any() or not torch.isfinite(mass).all():
        raise ContractError("policy must have positive finite mass")
    if mode == "argmax":
        idx = torch.argmax(flat.detach(), dim=1)
    elif mode == "sample":
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        probs = flat.detach().double().cpu().numpy()
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(n) * cdf[:, -1]
        idx = np.minimum((cdf < u[:, None]).sum(axis=1), h * w - 1)
        # never land on a zero-probability cell due to floating point
        for i in np.nonzero(probs[np.arange(n), idx] <= 0)[0]:
            idx[i] = int(np.nonzero(probs[i] > 0)[0][-1])
        idx = torch.as_tensor(idx, dtype=torch.long, device=flat.device)
    else:
        raise ContractError(f"unknown seed mode {mode!r}")
    chosen = flat.gather(1, idx[:, None]).squeeze(1)
    log_prob = torch.log(chosen)
    seed = torch.stack([idx // w, idx % w], dim=1)
    v = None
    if value is not None:
        value = torch.as_tensor(value)
        vv = value if batched else value.unsqueeze(0)
        v = vv.flatten(1).gather(1, idx[:, None]).squeeze(1)
    if not batched:
        return SeedDecision(seed=seed[0], log_prob=log_prob[0], policy=policy, value_at_seed=None if v is None else v[0])
    return SeedDecision(seed=seed, log_prob=log_prob, policy=policy, value_at_seed=v)


@dataclass
class PolicyGradTerms:
    reward: torch.Tensor
    advantage: torch.Tensor
    policy_term: torch.Tensor
    entropy_term: torch.Tensor
    critic_term: torch.Tensor

    def total(self, critic_weight: float = CRITIC_WEIGHT) -> torch.Tensor:
        return self.policy_term + self.entropy_term + critic_weight * self.critic_term


def policy_grad_terms(reward, decision: SeedDecision, entropy_weight: float = ENTROPY_WEIGHT) -> PolicyGradTerms:
    """Surrogate losses (batch-averaged) for the seed policy and its critic.

    The advantage ``reward - value`` is a constant in the policy term and
    the reward is a constant target for the critic.
    """
    reward = torch.as_tensor(reward, dtype=decision.log_prob.dtype)
    value = decision.value_at_seed
    if value is None:
        value = torch.zeros_like(decision.log_prob)
    advantage = (reward - value).detach()
    policy_term = -(advantage * decision.log_prob).mean()
    entropy_term = -entropy_weight * entropy(decision.policy).mean()
    critic_term = ((value - reward.detach()) ** 2).mean()
    return PolicyGradTerms(
        reward=reward, advantage=advantage, policy_term=policy_term,
        entropy_term=entropy_term, critic_term=critic_term,
    )
