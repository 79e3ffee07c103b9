"""Supervised warm start that produces the base policy RL starts from.

The base policy plays the role of a pretrained model: it knows the response
format, has partial arithmetic skill, emits a few ``THINK`` tokens unless
told to be concise, and avoids answers listed in a hint.  Skill is capped
by the demonstrator itself, which answers wrongly with probability
``pretrain_noise`` but never with a hinted answer.  It is
trained by maximum likelihood on synthetic demonstrations whose task seeds
are disjoint from the RL pool and the held-out set.
"""

from __future__ import annotations

import numpy as np

from .config import TrainConfig
from .env import ANS, END, THINK, HintSpec, HintVariant, Vocab, generate_task, render_prompt
from .optim import AdamState, apply_update
from .policy import PolicyParams, PolicyShape, backward_windows, forward_windows, init_params, windows_for

PRETRAIN_SEED_OFFSET = 2_000_000


def policy_shape(cfg: TrainConfig) -> PolicyShape:
    return PolicyShape(cfg.window, cfg.embed, Vocab(cfg.modulus).size, cfg.hidden)


def _demo(rng: np.random.Generator, cfg: TrainConfig, vocab: Vocab):
    diffs = np.asarray(cfg.difficulties)
    w = np.asarray(cfg.difficulty_weights, dtype=np.float64)
    d = int(rng.choice(diffs, p=w / w.sum()))
    q = generate_task(PRETRAIN_SEED_OFFSET + int(rng.integers(1 << 30)), d, cfg.modulus)
    concise = rng.random() < 0.25
    spec = HintSpec(HintVariant.CONCISE) if concise else HintSpec()
    others = [a for a in range(cfg.modulus) if a != q.truth]
    if rng.random() < cfg.pretrain_hint_prob:
        k = int(rng.integers(1, min(len(others) - 1, cfg.group_size) + 1))
        wrong = rng.choice(others, size=k, replace=False)
        variant = HintVariant.CONCISE_HINT if concise else HintVariant.HINT
        spec = HintSpec(variant, tuple(int(a) for a in wrong))
    answer = q.truth
    if rng.random() < cfg.pretrain_noise:
        # imperfect demonstrator, but it never repeats a hinted answer
        allowed = [a for a in others if a not in spec.wrong_answers]
        answer = int(rng.choice(allowed))
    if concise:
        n_think = 0
    else:
        n_think = int(rng.geometric(1.0 / (1.0 + cfg.pretrain_think_mean))) - 1
    response = [THINK] * n_think + [ANS, vocab.digit(answer), END]
    return render_prompt(q, spec), response


def pretrain(cfg: TrainConfig, seed: int | None = None) -> PolicyParams:
    seed = cfg.seed if seed is None else seed
    shape = policy_shape(cfg)
    params = init_params(shape, seed, cfg.init_scale)
    if cfg.init == "random" or cfg.pretrain_steps == 0:
        return params
    vocab = Vocab(cfg.modulus)
    rng = np.random.default_rng([seed, 99])
    state = AdamState.zeros(shape.n_params)
    backend = cfg.kernel_backend
    for _ in range(cfg.pretrain_steps):
        wins, toks = [], []
        for _ in range(cfg.pretrain_batch):
            prompt, response = _demo(rng, cfg, vocab)
            wins.append(windows_for(prompt, response, shape.window))
            toks.append(response)
        win = np.concatenate(wins)
        tok = np.concatenate(toks).astype(np.int64)
        hidden, lp = forward_windows(params, win, backend)
        dz = np.exp(lp)
        dz[np.arange(len(tok)), tok] -= 1.0
        dz /= len(tok)
        grad = backward_windows(params, win, hidden, dz, backend)
        theta, state = apply_update(params.theta, grad, state, cfg.pretrain_lr)
        params = params.with_theta(theta)
    return params
