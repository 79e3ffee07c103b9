import pytest

from ltelab.config import (
    REFERENCE_PRESET, ConfigError, Mode, TrainConfig, config_dict, dump_config, load_config,
    parse_config_text,
)


def test_defaults():
    c = TrainConfig()
    assert (c.group_size, c.batch_size, c.steps, c.clip_eps, c.kl_coef, c.shaping_gamma, c.temperature) == \
        (8, 32, 300, 0.2, 0.001, 0.1, 1.0)
    assert c.modulus == 10 and c.max_len == 64 and c.mode is Mode.LTE
    assert REFERENCE_PRESET["lr"] == 1e-6


def test_round_trip(tmp_path):
    c = TrainConfig(mode=Mode.GRPO_EXTRA, difficulties=(1, 4), difficulty_weights=(0.5, 0.5), kl_offpolicy=True)
    path = tmp_path / "c.txt"
    path.write_text(dump_config(c))
    assert load_config(path) == c
    assert config_dict(load_config(path)) == config_dict(c)


def test_parse_comments_and_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# smoke\nsteps = 3   # short\nmode = GRPO\n\nbatch_size=4\n")
    c = load_config(path, {"mode": "LTE"})
    assert c.steps == 3 and c.batch_size == 4 and c.mode is Mode.LTE


@pytest.mark.parametrize("text", ["stpes = 3", "steps", "steps = three", "mode = PPO", "steps = 1\nsteps = 2",
                                  "group_size = 1", "clip_eps = 1.5", "lr = 0", "kl_offpolicy = maybe",
                                  "difficulties = 1,2\ndifficulty_weights = 1", "backend = gpu"])
def test_rejects_bad_config(text):
    with pytest.raises(ConfigError):
        TrainConfig(**parse_config_text(text))


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/cfg.txt")


def test_unknown_override_rejected(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("steps = 3\n")
    with pytest.raises(ConfigError):
        load_config(path, {"stepz": "4"})
