"""Training loop: sample, verify, optionally rescue none-pass groups, update."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics as M
from .config import Mode, TrainConfig
from .env import PLAIN, Query, generate_task, render_prompt
from .grpo import LossConfig, RolloutGroup
from .lte import (
    PassClass,
    Sampler,
    classify_group,
    hinted_extra_rollouts,
    mixed_loss_and_grad,
    replace,
    score_rollouts,
    select_hint,
)
from .optim import AdamState, apply_update
from .policy import PolicyParams, SampleConfig, sample_batch, save_checkpoint
from .warmstart import pretrain

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 1_000_000

# sub-stream tags for np.random.default_rng([seed, tag, step, ...])
_RNG_BATCH, _RNG_ROLLOUT, _RNG_EXTRA, _RNG_REPLACE, _RNG_EVAL = 1, 2, 3, 4, 5


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainState:
    params: PolicyParams
    ref_params: PolicyParams
    opt: AdamState
    step: int = 0

    @classmethod
    def initial(cls, params: PolicyParams) -> "TrainState":
        return cls(params.copy(), params.copy(), AdamState.zeros(params.shape.n_params), 0)


@dataclass
class StepMetrics:
    step: int
    none_pass: int
    some_pass: int
    all_pass: int
    entropy: float
    response_length: float
    truncated_frac: float
    surrogate: float
    offpolicy: float
    kl: float
    entropy_term: float
    objective: float
    grad_norm: float
    n_onpolicy_tokens: int
    n_offpolicy_tokens: int
    extra_groups: int = 0
    rescued_groups: int = 0
    extra_correct: int = 0
    hint_variants: dict = field(default_factory=dict)
    val_mean_at_k: Optional[float] = None
    val_pass_at_k: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def loss_config(cfg: TrainConfig) -> LossConfig:
    return LossConfig(
        clip_eps=cfg.clip_eps,
        kl_coef=cfg.kl_coef,
        entropy_coef=cfg.entropy_coef,
        shaping_gamma=cfg.shaping_gamma,
        kl_offpolicy=cfg.kl_offpolicy,
        entropy_offpolicy=cfg.entropy_offpolicy,
    )


def training_pool(cfg: TrainConfig) -> list[Query]:
    rng = np.random.default_rng([cfg.data_seed, 7])
    w = np.asarray(cfg.difficulty_weights, dtype=np.float64)
    diffs = rng.choice(np.asarray(cfg.difficulties), size=cfg.train_pool, p=w / w.sum())
    return [generate_task(cfg.data_seed * cfg.train_pool + i, int(d), cfg.modulus)
            for i, d in enumerate(diffs)]


def heldout_set(cfg: TrainConfig) -> list[Query]:
    return M.heldout_queries(cfg.modulus, cfg.difficulties, cfg.eval_per_tier, EVAL_SEED_OFFSET)


def eval_sample_config(cfg: TrainConfig) -> SampleConfig:
    return SampleConfig(cfg.eval_temperature, cfg.eval_max_len, cfg.eval_top_k, cfg.eval_top_p)


def train_step(
    state: TrainState,
    queries: Sequence[Query],
    cfg: TrainConfig,
    hinted_sampler: Optional[Sampler] = None,
) -> tuple[TrainState, StepMetrics]:
    step = state.step
    backend = cfg.kernel_backend
    old = state.params.copy()  # pi_old for every ratio in this step
    G = cfg.group_size
    scfg = SampleConfig(temperature=cfg.temperature, max_len=cfg.max_len)

    rng = np.random.default_rng([cfg.seed, _RNG_ROLLOUT, step])
    prompts = [render_prompt(q) for q in queries for _ in range(G)]
    rollouts = sample_batch(old, prompts, scfg, rng, backend=backend)
    groups = []
    for i, q in enumerate(queries):
        groups.append(RolloutGroup(q, score_rollouts(q, rollouts[i * G:(i + 1) * G])))
    statuses = [classify_group(g) for g in groups]
    none_pass, some_pass, all_pass = M.group_status_counts(statuses)

    batch = []
    variants: Counter = Counter()
    extra_groups = rescued = extra_correct = 0
    for i, (g, st) in enumerate(zip(groups, statuses)):
        if cfg.mode is Mode.GRPO or st.pass_class is not PassClass.NONE:
            batch.append(g.with_advantages())
            continue
        spec = select_hint(st) if cfg.mode is Mode.LTE else PLAIN
        variants[spec.variant.value] += 1
        extra_groups += 1
        erng = np.random.default_rng([cfg.seed, _RNG_EXTRA, step, i])
        extra = hinted_extra_rollouts(old, g.query, spec, G, scfg, erng,
                                      sampler=hinted_sampler, backend=backend)
        correct = [r for r in extra if r.reward == 1]
        extra_correct += len(correct)
        rescued += int(bool(correct))
        batch.append(replace(g, correct, np.random.default_rng([cfg.seed, _RNG_REPLACE, step, i])))

    lcfg = loss_config(cfg)
    params, opt = state.params, state.opt
    breakdown = None
    grad_norm = 0.0
    for _ in range(cfg.inner_epochs):
        bd, grad = mixed_loss_and_grad(params, state.ref_params, batch, lcfg, backend)
        if breakdown is None:
            breakdown = bd
        if not np.isfinite(bd.total) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite loss or gradient at step {step}")
        grad_norm = float(np.linalg.norm(grad))
        theta, opt = apply_update(params.theta, grad, opt, cfg.lr,
                                  cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"non-finite parameters after step {step}")
        params = params.with_theta(theta)

    lengths = [len(r) for r in rollouts]
    metrics = StepMetrics(
        step=step,
        none_pass=none_pass,
        some_pass=some_pass,
        all_pass=all_pass,
        entropy=breakdown.mean_entropy,
        response_length=float(np.mean(lengths)),
        truncated_frac=float(np.mean([r.truncated for r in rollouts])),
        surrogate=breakdown.surrogate,
        offpolicy=breakdown.offpolicy,
        kl=breakdown.kl,
        entropy_term=breakdown.entropy,
        objective=breakdown.total,
        grad_norm=grad_norm,
        n_onpolicy_tokens=breakdown.n_onpolicy_tokens,
        n_offpolicy_tokens=breakdown.n_offpolicy_tokens,
        extra_groups=extra_groups,
        rescued_groups=rescued,
        extra_correct=extra_correct,
        hint_variants=dict(sorted(variants.items())),
    )
    return TrainState(params, state.ref_params, opt, step + 1), metrics


def select_batch(pool: Sequence[Query], cfg: TrainConfig, step: int) -> list[Query]:
    rng = np.random.default_rng([cfg.seed, _RNG_BATCH, step])
    n = min(cfg.batch_size, len(pool))
    return [pool[int(i)] for i in rng.choice(len(pool), size=n, replace=False)]


def initial_params(cfg: TrainConfig) -> PolicyParams:
    return pretrain(cfg)


def train(
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    init: Optional[PolicyParams] = None,
    on_step: Optional[Callable[[StepMetrics], None]] = None,
) -> tuple[PolicyParams, list[StepMetrics]]:
    """Run ``cfg.steps`` steps; write ``metrics.jsonl`` and checkpoints into ``out_dir``."""
    params = initial_params(cfg) if init is None else init.copy()
    state = TrainState.initial(params)
    pool = training_pool(cfg)
    heldout = heldout_set(cfg)
    history: list[StepMetrics] = []
    sink = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        sink = open(out_dir / "metrics.jsonl", "w")
    try:
        for step in range(cfg.steps):
            state, m = train_step(state, select_batch(pool, cfg, step), cfg)
            last = step + 1 == cfg.steps
            if cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or last):
                report = M.evaluate(state.params, heldout, cfg.eval_k, eval_sample_config(cfg),
                                    seed=hash_seed(cfg.seed, _RNG_EVAL, step), backend=cfg.kernel_backend)
                m.val_mean_at_k = report.mean_at_k
                m.val_pass_at_k = report.pass_at_k
            history.append(m)
            if sink is not None:
                sink.write(m.to_json() + "\n")
                sink.flush()
                if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and not last:
                    save_checkpoint(state.params, out_dir / f"ckpt-{step + 1:06d}.bin")
            if on_step is not None:
                on_step(m)
            log.debug("step %d none=%d some=%d all=%d", step, m.none_pass, m.some_pass, m.all_pass)
    finally:
        if sink is not None:
            sink.close()
    if out_dir is not None:
        save_checkpoint(state.params, out_dir / "ckpt-final.bin")
    return state.params, history


def hash_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])
