"""Group-relative advantages and the token-level clipped policy objective.

The objective is maximized; ``loss_and_grad`` style functions return the
breakdown in that sign convention together with the gradient of the
*negated* objective, i.e. a descent direction for a minimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .env import Query
from .policy import PolicyParams, Rollout, backward_windows, forward_windows, windows_for


@dataclass(frozen=True)
class GroupAdvantages:
    advantages: np.ndarray
    mean: float
    std: float


def compute_advantages(rewards: Sequence[float]) -> GroupAdvantages:
    """``(R_i - mean) / std`` with population std; zero everywhere if std is 0."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need a group of at least 2 rewards")
    mean = float(r.mean())
    std = float(r.std())
    if std == 0.0:
        return GroupAdvantages(np.zeros_like(r), mean, 0.0)
    return GroupAdvantages((r - mean) / std, mean, std)


def importance_ratio(new_logprob, old_logprob):
    return np.exp(np.asarray(new_logprob, dtype=np.float64) - old_logprob)


def clipped_term(ratio, advantage, eps: float):
    """Pessimistic PPO term ``min(r*A, clip(r, 1-eps, 1+eps)*A)``."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - eps, 1 + eps) * advantage)


def kl_penalty(new_logprob, ref_logprob):
    """k3 estimator of KL(pi || pi_ref) for one sampled token; always >= 0."""
    x = np.asarray(ref_logprob, dtype=np.float64) - new_logprob
    return np.exp(x) - x - 1.0


@dataclass(eq=False)
class RolloutGroup:
    """``G`` on-policy rollouts for one query."""

    query: Query
    rollouts: list[Rollout]
    advantages: Optional[GroupAdvantages] = None

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.query.prompt_tokens

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts], dtype=np.float64)

    @property
    def offpolicy(self) -> np.ndarray:
        return np.zeros(len(self.rollouts), dtype=bool)

    def with_advantages(self) -> "RolloutGroup":
        self.advantages = compute_advantages(self.rewards)
        return self


@dataclass(frozen=True)
class LossConfig:
    clip_eps: float = 0.2
    kl_coef: float = 0.001
    entropy_coef: float = 0.0
    shaping_gamma: float = 0.1
    kl_offpolicy: bool = False
    entropy_offpolicy: bool = False


@dataclass(frozen=True)
class LossBreakdown:
    """Objective pieces, maximization sign convention.

    ``total = surrogate + offpolicy - kl_coef * kl + entropy_coef * entropy``
    where each piece is already divided by its token count.
    """

    surrogate: float
    offpolicy: float
    kl: float
    entropy: float
    total: float
    n_onpolicy_tokens: int
    n_offpolicy_tokens: int
    mean_entropy: float = field(default=0.0)


def _gather(groups, window: int) -> dict:
    wins, toks, old, adv, off = [], [], [], [], []
    for g in groups:
        if g.advantages is None:
            raise ValueError(f"group for {g.query.id} has no advantages")
        if len(g.advantages.advantages) != len(g.rollouts):
            raise ValueError("advantage count does not match rollout count")
        offflags = g.offpolicy
        for ro, a, is_off in zip(g.rollouts, g.advantages.advantages, offflags):
            L = len(ro.response_tokens)
            if L == 0:
                continue
            if ro.old_logprobs is None or len(ro.old_logprobs) != L:
                raise ValueError("rollout is missing old log-probs")
            wins.append(windows_for(g.prompt, ro.response_tokens, window))
            toks.append(ro.response_tokens)
            old.append(ro.old_logprobs)
            adv.append(np.full(L, a))
            off.append(np.full(L, bool(is_off)))
    if not toks:
        raise ValueError("batch contains no tokens")
    return dict(
        windows=np.concatenate(wins),
        tokens=np.concatenate(toks).astype(np.int64),
        old=np.concatenate(old),
        adv=np.concatenate(adv),
        off=np.concatenate(off),
    )


def policy_objective(
    params: PolicyParams,
    ref_params: Optional[PolicyParams],
    groups: Sequence,
    config: LossConfig,
    backend: Optional[str] = None,
) -> tuple[LossBreakdown, np.ndarray]:
    """Mixed on/off-policy objective over a batch of groups.

    On-policy tokens use the clipped ratio against their recorded old
    log-probs and are normalized by the on-policy token count.  Off-policy
    tokens use the shaped ratio ``p/(p+gamma)`` of the current policy's
    probability with the old-policy term fixed to 1, no clipping, normalized
    by the off-policy token count.  All tokens are scored under the group's
    plain prompt.
    """
    if not groups:
        raise ValueError("empty batch")
    b = _gather(groups, params.shape.window)
    tok, old, adv, off = b["tokens"], b["old"], b["adv"], b["off"]
    on = ~off
    N = tok.size
    rows = np.arange(N)

    hidden, lp = forward_windows(params, b["windows"], backend)
    new = lp[rows, tok]
    p = np.exp(lp)
    ent = -(p * lp).sum(axis=1)

    Z = int(on.sum())
    Zp = int(off.sum())
    w_on = 1.0 / Z if Z else 0.0
    w_off = 1.0 / Zp if Zp else 0.0
    # per-token weights on d(objective)/d(logprob of sampled token)
    coef = np.zeros(N)

    ratio = np.exp(new[on] - old[on])
    a_on = adv[on]
    unclipped = ratio * a_on
    clipped = np.clip(ratio, 1 - config.clip_eps, 1 + config.clip_eps) * a_on
    surr_tok = np.minimum(unclipped, clipped)
    coef[on] = np.where(unclipped <= clipped, unclipped, 0.0) * w_on

    rp = np.exp(new[off])
    g = config.shaping_gamma
    shaped = rp / (rp + g)
    a_off = adv[off]
    coef[off] = a_off * g * rp / (rp + g) ** 2 * w_off

    kl_mask = on | off if config.kl_offpolicy else on
    ent_mask = on | off if config.entropy_offpolicy else on
    tok_w = np.where(off, w_off, w_on)

    kl_tok = np.zeros(N)
    if ref_params is not None:
        _, ref_lp = forward_windows(ref_params, b["windows"], backend)
        ref_new = ref_lp[rows, tok]
        x = ref_new - new
        kl_tok = np.exp(x) - x - 1.0
        dkl = 1.0 - np.exp(x)
        coef -= np.where(kl_mask, config.kl_coef * dkl * tok_w, 0.0)

    dz = -p * coef[:, None]
    dz[rows, tok] += coef
    if config.entropy_coef:
        ew = np.where(ent_mask, config.entropy_coef * tok_w, 0.0)
        dz -= (ew[:, None] * p) * (lp + ent[:, None])

    surrogate = float(surr_tok.sum()) * w_on
    offterm = float((shaped * a_off).sum()) * w_off
    kl = float((kl_tok * kl_mask * tok_w).sum())
    entropy = float((ent * ent_mask * tok_w).sum())
    total = surrogate + offterm - config.kl_coef * kl + config.entropy_coef * entropy
    breakdown = LossBreakdown(
        surrogate=surrogate,
        offpolicy=offterm,
        kl=kl,
        entropy=entropy,
        total=total,
        n_onpolicy_tokens=Z,
        n_offpolicy_tokens=Zp,
        mean_entropy=float(ent[on].mean()) if Z else float(ent.mean()),
    )
    grad = -backward_windows(params, b["windows"], hidden, dz, backend)
    return breakdown, grad


def grpo_loss_and_grad(params, ref_params, groups, config: LossConfig, backend=None):
    """Plain GRPO: every rollout must be on-policy."""
    for g in groups:
        if np.any(g.offpolicy):
            raise ValueError("grpo_loss_and_grad received off-policy rollouts")
    return policy_objective(params, ref_params, groups, config, backend)

