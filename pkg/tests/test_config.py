from __future__ import annotations

import pytest
import yaml

from crystalgfn.config import DEFAULT_CONFIG_TEXT, ConfigError, config_from_dict, default_config, load_config


def test_default_config_is_valid_and_published_values():
    cfg = default_config()
    assert cfg.sampler.T == 3 and cfg.sampler.min_l == 2.0 and cfg.sampler.max_a == 120.0
    assert (cfg.reward.w_e, cfg.reward.w_p, cfg.reward.w_b, cfg.reward.w_c) == (0.2, 0.2, 0.5, 0.1)
    assert cfg.train.batch_size == 32 and cfg.train.lr == 1e-3 and cfg.train.lr_logz == 0.1
    assert len(cfg.sampler.elements) == 12


def test_dump_load_is_a_fixed_point(tmp_path):
    cfg = default_config()
    text = cfg.dump()
    p = tmp_path / "c.yaml"
    p.write_text(text)
    again = load_config(p)
    assert again.dump() == text
    assert again.to_dict() == cfg.to_dict()


def test_seed_flows_into_training():
    cfg = config_from_dict({"seed": 7})
    assert cfg.train.seed == 7


def test_partial_sections_fill_defaults():
    cfg = config_from_dict({"policy": {"width": 16}, "sampler": None})
    assert cfg.policy.width == 16 and cfg.policy.head_hidden == 64 and cfg.sampler.T == 3


@pytest.mark.parametrize("data, match", [
    ({"sampler": {"Tmax": 3}}, "unknown field"),
    ({"bogus": 1}, "unknown top-level"),
    ({"version": 2}, "version"),
    ({"policy": {"width": "wide"}}, "policy.width"),
    ({"train": {"batch_size": 3.5}}, "integer"),
    ({"policy": {"hierarchical": "yes"}}, "true/false"),
    ({"sampler": {"elements": ["Li", "Xx"]}}, "Xx"),
    ({"sampler": {"elements": "Li"}}, "list"),
    ({"sampler": {"min_l": 5.0, "max_l": 3.0}}, "min_l"),
    ({"reward": {"w_bg": 0.5}}, "gap_command"),
    ({"seed": "zero"}, "seed"),
    ({"policy": 3}, "mapping"),
])
def test_invalid_configs_raise(data, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(data)


def test_missing_file_and_bad_yaml(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")
    p = tmp_path / "bad.yaml"
    p.write_text("sampler: [unclosed\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(p)


def test_default_text_parses_to_same_values():
    assert config_from_dict(yaml.safe_load(DEFAULT_CONFIG_TEXT)).to_dict() == default_config().to_dict()
