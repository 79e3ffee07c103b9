import time

import numpy as np
import pytest

from ltelab import trainer
from ltelab.config import Mode, TrainConfig, load_config
from ltelab.env import ANS, END, HINT_OPEN, Vocab, evaluate_prompt, generate_task, parse_prompt
from ltelab.policy import PolicyShape, Rollout, load_checkpoint, zeros
from ltelab.warmstart import policy_shape, pretrain
from pathlib import Path

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = TrainConfig(modulus=5, window=8, embed=4, hidden=16, pretrain_steps=60, pretrain_batch=16, steps=4,
                   batch_size=4, group_size=4, max_len=8, eval_every=0, eval_per_tier=5, eval_max_len=8,
                   difficulties=(1, 2), difficulty_weights=(0.5, 0.5), train_pool=32)


def silent_policy(cfg):
    """Emits END immediately, so every group is none-pass."""
    p = zeros(policy_shape(cfg))
    p.blocks()[4][END] = 60.0
    return p


def forced_correct_sampler(modulus):
    def sampler(prompts, config, rng):
        out = []
        for pr in prompts:
            plain, _ = parse_prompt(pr, modulus)
            resp = np.array([ANS, Vocab(modulus).digit(evaluate_prompt(plain, modulus)), END])
            out.append(Rollout(resp, np.zeros(3), False, tuple(pr)))
        return out
    return sampler


def _batch(cfg):
    return trainer.select_batch(trainer.training_pool(cfg), cfg, 0)


def test_grpo_none_pass_batch_leaves_params_unchanged():
    cfg = TINY.replace(mode=Mode.GRPO, kl_coef=0.0, entropy_coef=0.0)
    st = trainer.TrainState.initial(silent_policy(cfg))
    new, m = trainer.train_step(st, _batch(cfg), cfg)
    assert m.none_pass == cfg.batch_size and m.some_pass == m.all_pass == 0
    assert new.params.theta.tobytes() == st.params.theta.tobytes()
    assert new.step == 1


def test_lte_updates_iff_a_hinted_rollout_is_correct():
    cfg = TINY.replace(mode=Mode.LTE, kl_coef=0.0, entropy_coef=0.0)
    st = trainer.TrainState.initial(silent_policy(cfg))
    new, m = trainer.train_step(st, _batch(cfg), cfg, hinted_sampler=forced_correct_sampler(cfg.modulus))
    assert m.none_pass == cfg.batch_size  # counted before replacement
    assert m.extra_correct == cfg.batch_size * cfg.group_size
    # every slot replaced by a correct answer: zero group variance, zero advantage
    assert new.params.theta.tobytes() == st.params.theta.tobytes()

    def half_right(prompts, config, rng):
        rs = forced_correct_sampler(cfg.modulus)(prompts, config, rng)
        for r in rs[1::2]:
            r.response_tokens = np.array([END])
            r.old_logprobs = np.zeros(1)
        return rs

    new, m = trainer.train_step(st, _batch(cfg), cfg, hinted_sampler=half_right)
    assert m.rescued_groups == cfg.batch_size and m.n_offpolicy_tokens > 0
    assert np.any(new.params.theta != st.params.theta)

    def never_right(prompts, config, rng):
        return [Rollout(np.array([END]), np.zeros(1), False, tuple(p)) for p in prompts]

    new, m = trainer.train_step(st, _batch(cfg), cfg, hinted_sampler=never_right)
    assert m.extra_correct == 0
    assert new.params.theta.tobytes() == st.params.theta.tobytes()


def test_lte_hints_but_extra_mode_does_not(monkeypatch):
    import ltelab.trainer as T
    seen = []
    real = T.hinted_extra_rollouts

    def spy(params, q, spec, G, config, rng, sampler=None, backend=None):
        rs = real(params, q, spec, G, config, rng, sampler=sampler, backend=backend)
        seen.append((spec, rs))
        return rs

    monkeypatch.setattr(T, "hinted_extra_rollouts", spy)
    for mode in (Mode.LTE, Mode.GRPO_EXTRA):
        seen.clear()
        cfg = TINY.replace(mode=mode)
        T.train_step(T.TrainState.initial(silent_policy(cfg)), _batch(cfg), cfg)
        assert len(seen) == cfg.batch_size
        for spec, rs in seen:
            if mode is Mode.LTE:
                assert spec.variant.value == "Hint" and all(r.hinted for r in rs)
                assert all(HINT_OPEN in r.prompt_used for r in rs)
            else:
                assert spec.variant.value == "Plain" and not any(r.hinted for r in rs)


def test_counters_sum_and_reference_frozen():
    cfg = TINY.replace(steps=3)
    p0 = pretrain(cfg)
    st = trainer.TrainState.initial(p0)
    ref = st.ref_params.theta.copy()
    pool = trainer.training_pool(cfg)
    for s in range(3):
        st, m = trainer.train_step(st, trainer.select_batch(pool, cfg, s), cfg)
        assert m.none_pass + m.some_pass + m.all_pass == cfg.batch_size
        assert np.isfinite(m.entropy) and m.response_length >= 1
    assert st.ref_params.theta.tobytes() == ref.tobytes()
    assert np.any(st.params.theta != ref)


def test_divergence_guard(monkeypatch):
    import ltelab.trainer as T
    cfg = TINY

    def bad(params, ref, groups, config, backend=None):
        bd, g = real(params, ref, groups, config, backend)
        return bd, np.full_like(g, np.nan)

    real = T.mixed_loss_and_grad
    monkeypatch.setattr(T, "mixed_loss_and_grad", bad)
    with pytest.raises(T.DivergenceError):
        T.train_step(T.TrainState.initial(pretrain(cfg)), _batch(cfg), cfg)


def test_zero_steps_returns_initial_params(tmp_path):
    cfg = TINY.replace(steps=0)
    init = pretrain(cfg)
    params, hist = trainer.train(cfg, tmp_path, init=init)
    assert hist == [] and params.theta.tobytes() == init.theta.tobytes()
    assert (tmp_path / "metrics.jsonl").read_text() == ""
    assert load_checkpoint(tmp_path / "ckpt-final.bin").theta.tobytes() == init.theta.tobytes()


def test_log_lines_and_checkpoint_cadence(tmp_path):
    cfg = TINY.replace(steps=5, checkpoint_every=2, eval_every=2)
    _, hist = trainer.train(cfg, tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == len(hist) == 5
    assert sorted(p.name for p in tmp_path.glob("ckpt-*.bin")) == ["ckpt-000002.bin", "ckpt-000004.bin",
                                                                    "ckpt-final.bin"]
    assert [m.val_pass_at_k is not None for m in hist] == [False, True, False, True, True]


def test_training_is_deterministic(tmp_path):
    cfg = TINY.replace(steps=3)
    trainer.train(cfg, tmp_path / "a")
    trainer.train(cfg, tmp_path / "b")
    for name in ("metrics.jsonl", "ckpt-final.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_pool_and_heldout_are_disjoint():
    cfg = TrainConfig()
    pool = {q.id for q in trainer.training_pool(cfg)}
    held = {q.id for q in trainer.heldout_set(cfg)}
    assert len(pool) == cfg.train_pool and not pool & held


def test_smoke_run_under_a_minute(tmp_path):
    cfg = load_config(CONFIGS / "smoke.conf")
    assert (cfg.steps, cfg.batch_size, cfg.group_size, cfg.difficulties) == (20, 8, 4, (1,))
    t0 = time.perf_counter()
    _, hist = trainer.train(cfg, tmp_path)
    assert time.perf_counter() - t0 < 60
    assert len(hist) == 20
