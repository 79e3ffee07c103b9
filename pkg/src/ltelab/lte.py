"""Hinted extra rollouts and mixed-policy optimization for none-pass groups."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .env import HintSpec, HintVariant, Query, extract_answer, render_prompt, verify
from .grpo import GroupAdvantages, LossConfig, RolloutGroup, compute_advantages, policy_objective
from .policy import PolicyParams, Rollout, SampleConfig, sample_batch


class PassClass(str, enum.Enum):
    NONE = "NonePass"
    SOME = "SomePass"
    ALL = "AllPass"


class TruncClass(str, enum.Enum):
    ALL = "AllTruncated"
    SOME = "SomeTruncated"
    NONE = "NoneTruncated"


@dataclass(frozen=True)
class GroupStatus:
    pass_class: PassClass
    trunc_class: TruncClass
    wrong_answers: tuple[int, ...]


def classify_group(group: RolloutGroup) -> GroupStatus:
    rollouts = group.rollouts
    if not rollouts:
        raise ValueError("cannot classify an empty group")
    n_pass = sum(int(r.reward) for r in rollouts)
    if n_pass == 0:
        pc = PassClass.NONE
    elif n_pass == len(rollouts):
        pc = PassClass.ALL
    else:
        pc = PassClass.SOME
    n_trunc = sum(bool(r.truncated) for r in rollouts)
    if n_trunc == len(rollouts):
        tc = TruncClass.ALL
    elif n_trunc:
        tc = TruncClass.SOME
    else:
        tc = TruncClass.NONE
    truth = group.query.truth
    wrong = sorted({
        r.answer for r in rollouts
        if not r.truncated and not r.reward and r.answer is not None and r.answer != truth
    })
    return GroupStatus(pc, tc, tuple(wrong))


def select_hint(status: GroupStatus) -> HintSpec:
    """Template for a none-pass group, chosen by its truncation census."""
    if status.pass_class is not PassClass.NONE:
        raise ValueError("hints are only selected for none-pass groups")
    if status.trunc_class is TruncClass.ALL:
        return HintSpec(HintVariant.CONCISE)
    if status.trunc_class is TruncClass.SOME:
        return HintSpec(HintVariant.CONCISE_HINT, status.wrong_answers)
    return HintSpec(HintVariant.HINT, status.wrong_answers)


# (prompts, sample config, rng) -> rollouts; lets tests swap in oracle policies
Sampler = Callable[[Sequence[Sequence[int]], SampleConfig, np.random.Generator], list]


def score_rollouts(q: Query, rollouts: Sequence[Rollout]) -> list[Rollout]:
    for r in rollouts:
        r.answer = extract_answer(r.response_tokens, r.truncated, q.modulus)
        r.reward = verify(q, r.answer)
    return list(rollouts)


def hinted_extra_rollouts(
    params: PolicyParams,
    q: Query,
    spec: HintSpec,
    G: int,
    config: SampleConfig,
    rng: np.random.Generator,
    sampler: Optional[Sampler] = None,
    backend: Optional[str] = None,
) -> list[Rollout]:
    """``G`` rollouts conditioned on the rendered hint prompt, verified against ``q``."""
    prompt = render_prompt(q, spec)
    hinted = spec.variant is not HintVariant.PLAIN
    if sampler is None:
        rollouts = sample_batch(params, [prompt] * G, config, rng, hinted=hinted, backend=backend)
    else:
        rollouts = sampler([prompt] * G, config, rng)
        for r in rollouts:
            r.hinted = hinted
    if len(rollouts) != G:
        raise RuntimeError(f"sampler returned {len(rollouts)} rollouts, expected {G}")
    return score_rollouts(q, rollouts)


@dataclass(eq=False)
class MixedGroup:
    """A none-pass group after splicing in correct extra rollouts."""

    query: Query
    rollouts: list[Rollout]
    offpolicy: np.ndarray
    replaced_indices: tuple[int, ...]
    advantages: GroupAdvantages

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.query.prompt_tokens

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts], dtype=np.float64)


def replace(initial: RolloutGroup, hinted_correct: Sequence[Rollout], seed) -> MixedGroup:
    """Overwrite a uniformly random subset of initial rollouts with the correct extra ones.

    The replaced slots take the extra rollouts in order; survivors keep their
    positions.  Advantages are recomputed on the mixed rewards.
    """
    G = len(initial.rollouts)
    Gp = len(hinted_correct)
    if Gp > G:
        raise ValueError(f"{Gp} correct rollouts exceed group size {G}")
    if any(r.reward != 1 for r in hinted_correct):
        raise ValueError("only verified-correct rollouts may be spliced in")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = np.sort(rng.choice(G, size=Gp, replace=False)) if Gp else np.zeros(0, dtype=int)
    rollouts = list(initial.rollouts)
    off = np.zeros(G, dtype=bool)
    for i, r in zip(idx, hinted_correct):
        rollouts[i] = r
        off[i] = True
    rewards = np.array([r.reward for r in rollouts], dtype=np.float64)
    return MixedGroup(
        query=initial.query,
        rollouts=rollouts,
        offpolicy=off,
        replaced_indices=tuple(int(i) for i in idx),
        advantages=compute_advantages(rewards),
    )


def shape_ratio(raw_ratio, gamma: float = 0.1):
    """Regularized importance weight ``r / (r + gamma)``."""
    r = np.asarray(raw_ratio, dtype=np.float64)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if np.any(r < 0):
        raise ValueError("ratio must be non-negative")
    return r / (r + gamma)


def offpolicy_ratio(new_logprob):
    """Importance ratio with the old-policy term treated as 1: just ``pi(token)``."""
    return np.exp(np.asarray(new_logprob, dtype=np.float64))


def mixed_loss_and_grad(
    params: PolicyParams,
    ref_params: Optional[PolicyParams],
    groups: Sequence,
    config: LossConfig,
    backend: Optional[str] = None,
):
    """Shaped off-policy terms for spliced rollouts plus clipped on-policy terms."""
    for g in groups:
        off = np.asarray(g.offpolicy, dtype=bool)
        if off.shape != (len(g.rollouts),):
            raise ValueError("origin flags do not match rollouts")
        if isinstance(g, MixedGroup) and any(
            g.rollouts[i].reward != 1 for i in np.flatnonzero(off)
        ):
            raise ValueError("off-policy rollouts in a mixed group must be correct")
    return policy_objective(params, ref_params, groups, config, backend)
