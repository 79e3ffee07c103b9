"""Computable checks of the hint-pruning argument.

* exact answer distributions of a policy by dynamic programming over
  (context window, answer-extraction state),
* an idealized hint follower that removes known-wrong answers and
  renormalizes,
* the closed-form lower bound on the hinted/plain success ratio,
* brute-force mutual informations for the chain-rule identity.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .env import ANS, DIGIT0, END, PAD, extract_answer, extract_answers_batch, parse_prompt
from .policy import PolicyParams, Rollout, SampleConfig, forward_windows, sample_arrays, sample_batch

# extraction state while scanning a response
_NO_ANSWER = -1
_PENDING = -2


class IntractableError(RuntimeError):
    pass


@dataclass(frozen=True)
class AnswerDistribution:
    probs: np.ndarray  # P(answer = a) for a in 0..M-1
    no_answer: float  # truncated or malformed mass
    provenance: str = "exact"
    n_samples: Optional[int] = None

    @property
    def modulus(self) -> int:
        return len(self.probs)

    @property
    def total(self) -> float:
        return float(self.probs.sum() + self.no_answer)

    def p(self, answer: int) -> float:
        return float(self.probs[answer])

    def stderr(self, answer: int) -> float:
        """Binomial standard error of a Monte-Carlo estimate."""
        if self.n_samples is None:
            return 0.0
        p = self.p(answer)
        return math.sqrt(p * (1 - p) / self.n_samples)

    def to_dict(self) -> dict:
        return {
            "probs": [float(x) for x in self.probs],
            "no_answer": float(self.no_answer),
            "provenance": self.provenance,
            "n_samples": self.n_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AnswerDistribution":
        return cls(np.asarray(d["probs"], dtype=np.float64), float(d["no_answer"]),
                   d.get("provenance", "exact"), d.get("n_samples"))

    @classmethod
    def from_probs(cls, probs: Sequence[float], no_answer: float = 0.0) -> "AnswerDistribution":
        return cls(np.asarray(probs, dtype=np.float64), float(no_answer))


def _modulus_of(params: PolicyParams) -> int:
    M = params.shape.vocab - DIGIT0
    if M < 2:
        raise ValueError("policy vocabulary has no digit range")
    return M


def enumerate_answer_distribution(params: PolicyParams, prompt: Sequence[int], max_len: int,
                                  max_states: int = 500_000,
                                  backend: Optional[str] = None) -> AnswerDistribution:
    """Exact answer marginals for responses of length <= ``max_len``.

    The next-token distribution only sees the last ``W`` tokens, so paths
    sharing (window, extraction state) are merged at every step.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    W, V = params.shape.window, params.shape.vocab
    M = _modulus_of(params)
    ctx = [PAD] * W + [int(t) for t in prompt]
    windows = np.array([ctx[-W:]], dtype=np.int64)
    ext = np.array([_NO_ANSWER], dtype=np.int64)
    prob = np.array([1.0])
    answers = np.zeros(M)
    tokens = np.arange(V)
    is_digit = (tokens >= DIGIT0) & (tokens < DIGIT0 + M)

    for _ in range(max_len):
        _, lp = forward_windows(params, windows, backend)
        mass = prob[:, None] * np.exp(lp)  # (S, V)
        # responses ending here
        ending = mass[:, END]
        valid = ext >= 0
        np.add.at(answers, ext[valid], ending[valid])
        # continue with every non-END token
        cont = tokens[tokens != END]
        S = len(prob)
        new_prob = mass[:, cont].ravel()
        tok = np.tile(cont, S)
        old_ext = np.repeat(ext, len(cont))
        new_ext = np.where(
            tok == ANS, _PENDING,
            np.where(old_ext == _PENDING,
                     np.where(is_digit[tok], tok - DIGIT0, _NO_ANSWER),
                     old_ext),
        )
        new_win = np.concatenate([np.repeat(windows[:, 1:], len(cont), axis=0), tok[:, None]], axis=1)
        key = np.concatenate([new_win, new_ext[:, None]], axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        if len(uniq) > max_states:
            raise IntractableError(
                f"{len(uniq)} distinct states exceed the limit of {max_states}; "
                "reduce max_len or the context window"
            )
        prob = np.bincount(inv.ravel(), weights=new_prob, minlength=len(uniq))
        windows = np.ascontiguousarray(uniq[:, :W])
        ext = uniq[:, W].copy()
    # whatever has not emitted END by max_len is truncated
    no_answer = 1.0 - answers.sum()
    return AnswerDistribution(answers, float(no_answer), "exact")


def monte_carlo_answer_distribution(params: PolicyParams, prompt: Sequence[int], max_len: int,
                                    n_samples: int, seed: int,
                                    backend: Optional[str] = None) -> AnswerDistribution:
    M = _modulus_of(params)
    cfg = SampleConfig(temperature=1.0, max_len=max_len)
    counts = np.zeros(M + 1, dtype=np.int64)
    rng = np.random.default_rng(seed)
    chunk = 200_000
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        tokens, lengths, _ = sample_arrays(params, [prompt] * n, cfg, rng, backend)
        ans = extract_answers_batch(tokens, lengths, max_len, M)
        counts += np.bincount(ans + 1, minlength=M + 1)
        done += n
    none = counts[0]
    counts = counts[1:]
    return AnswerDistribution(counts / n_samples, none / n_samples, "monte-carlo", n_samples)


def prune_distribution(dist: AnswerDistribution, wrong_answers: Sequence[int]) -> AnswerDistribution:
    """Remove the mass on ``wrong_answers`` and renormalize what is left."""
    probs = dist.probs.copy()
    wrong = sorted(set(int(a) for a in wrong_answers))
    for a in wrong:
        probs[a] = 0.0
    keep = probs.sum() + dist.no_answer
    if keep <= 0:
        raise ValueError("wrong answers cover all probability mass; cannot renormalize")
    removed = dist.total - keep
    if removed == 0:
        return dist
    return AnswerDistribution(probs / keep, dist.no_answer / keep, dist.provenance, dist.n_samples)


class HintRespectingPolicy:
    """Idealized hint follower: the base policy conditioned on avoiding hinted answers.

    Its answer distribution is the base (plain prompt) distribution with the
    hinted answers' mass removed and renormalized.  As a sampler it parses
    the hint out of each prompt and rejection-samples the base policy on the
    plain prompt.
    """

    def __init__(self, params: PolicyParams, wrong_answers: Sequence[int] = (),
                 max_attempts: int = 1000, backend: Optional[str] = None):
        self.params = params
        self.wrong_answers = tuple(sorted(set(int(a) for a in wrong_answers)))
        self.modulus = _modulus_of(params)
        self.max_attempts = max_attempts
        self.backend = backend

    def answer_distribution(self, prompt: Sequence[int], max_len: int) -> AnswerDistribution:
        plain, spec = parse_prompt(prompt, self.modulus)
        wrong = self.wrong_answers or spec.wrong_answers
        base = enumerate_answer_distribution(self.params, plain, max_len, backend=self.backend)
        return prune_distribution(base, wrong)

    def __call__(self, prompts: Sequence[Sequence[int]], config: SampleConfig,
                 rng: np.random.Generator) -> list[Rollout]:
        out: list[Rollout] = []
        for prompt in prompts:
            plain, spec = parse_prompt(prompt, self.modulus)
            wrong = set(self.wrong_answers or spec.wrong_answers)
            for _ in range(self.max_attempts):
                r = sample_batch(self.params, [plain], config, rng, backend=self.backend)[0]
                a = extract_answer(r.response_tokens, r.truncated, self.modulus)
                if a not in wrong:
                    r.prompt_used = tuple(int(t) for t in prompt)
                    out.append(r)
                    break
            else:
                raise RuntimeError("hinted answers absorb (almost) all probability mass")
        return out


def hint_respecting_policy(params: PolicyParams, wrong_answers: Sequence[int]) -> HintRespectingPolicy:
    return HintRespectingPolicy(params, wrong_answers)


def pruning_bound(alpha: float, delta: float, tau: float, n: int) -> float:
    """Lower bound ``alpha * (1 + delta / (1 - tau**(1/n)))`` on the hinted/plain ratio."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if not delta >= 0:
        raise ValueError("delta must be non-negative")
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    if n < 1 or int(n) != n:
        raise ValueError("n must be a positive integer")
    return alpha * (1.0 + delta / (1.0 - tau ** (1.0 / n)))


def pruning_bound_approx(alpha: float, delta: float, tau: float, n: int) -> float:
    """First-order form using ``tau**(1/n) ~ 1 + ln(tau)/n``."""
    return alpha * (1.0 + delta * n / abs(math.log(tau)))


@dataclass(frozen=True)
class RatioCheck:
    ratio: Optional[float]
    exceeds_one: bool


def verify_ratio_exceeds_one(base: AnswerDistribution, pruned: AnswerDistribution,
                             truth: int) -> RatioCheck:
    p0 = base.p(truth)
    if p0 == 0:
        return RatioCheck(None, False)
    ratio = pruned.p(truth) / p0
    return RatioCheck(ratio, ratio > 1.0)


@dataclass(frozen=True)
class InformationGain:
    joint: float  # I(pi; D, H)
    data: float  # I(pi; D)
    conditional: float  # I(pi; H | D)


def _xlogy_ratio(p, num, den):
    return p * math.log(num / den) if p > 0 else 0.0


def information_gain_check(joint, tol: float = 1e-9) -> InformationGain:
    """Mutual informations of a joint table ``p[pi, d, h]`` by direct summation."""
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 3:
        raise ValueError("joint must be a 3-d table indexed (pi, data, hint)")
    if np.any(p < 0) or not np.isfinite(p).all() or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("joint must be non-negative and sum to 1")
    A, B, C = p.shape
    px = p.sum(axis=(1, 2))
    py = p.sum(axis=(0, 2))
    pxy = p.sum(axis=2)
    pyz = p.sum(axis=0)
    i_joint = i_data = i_cond = 0.0
    for x, y, z in itertools.product(range(A), range(B), range(C)):
        pxyz = p[x, y, z]
        i_joint += _xlogy_ratio(pxyz, pxyz, px[x] * pyz[y, z])
        i_cond += _xlogy_ratio(pxyz, pxyz * py[y], pxy[x, y] * pyz[y, z])
    for x, y in itertools.product(range(A), range(B)):
        i_data += _xlogy_ratio(pxy[x, y], pxy[x, y], px[x] * py[y])
    if abs(i_joint - (i_data + i_cond)) > tol:
        raise ArithmeticError("chain rule violated beyond tolerance")
    if i_cond < -tol:
        raise ArithmeticError("negative conditional mutual information")
    return InformationGain(i_joint, i_data, i_cond)
