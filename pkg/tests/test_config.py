import pytest
import yaml

from knowmvg.config import ConfigError, RunConfig, from_dict, load_config, set_path


def test_defaults_match_documented_values():
    cfg = RunConfig()
    assert (cfg.data.n_samples, cfg.data.image_size, cfg.model.grid, cfg.model.mask_size) == (2000, 128, 16, 64)
    assert (cfg.model.channels, cfg.model.d_model, cfg.model.d_know, cfg.model.top_k) == (64, 64, 64, 4)
    assert (cfg.train.lr, cfg.train.weight_decay, cfg.train.warmup, cfg.train.steps) == (3e-4, 0.0, 100, 2000)
    assert cfg.train.loss_weights == [1.0, 1.0, 1.0]
    assert cfg.ablation.kps_on and cfg.ablation.gla_on


def test_dump_round_trips(tmp_path):
    cfg = RunConfig(seed=5)
    cfg.train.steps = 77
    (tmp_path / "c.yaml").write_text(cfg.dump())
    assert load_config(tmp_path / "c.yaml") == cfg


def test_partial_file_fills_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("train:\n  steps: 10\nablation:\n  kps_on: false\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.train.steps == 10 and not cfg.ablation.kps_on and cfg.train.lr == 3e-4


@pytest.mark.parametrize("raw, match", [
    ({"train": {"stepz": 3}}, "unknown key"),
    ({"train": {"steps": "many"}}, "train.steps"),
    ({"ablation": {"gla_on": 1}}, "ablation.gla_on"),
    ({"model": {"grid": 0}}, "model.grid"),
    ({"model": {"grid": 12}}, "multiple"),
    ({"model": {"heads": 3}}, "heads"),
    ({"train": {"loss_weights": [1, 1]}}, "loss_weights"),
    ({"data": 3}, "data"),
])
def test_schema_errors(raw, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(raw)


def test_int_accepted_for_float():
    assert from_dict({"train": {"lr": 1}}).train.lr == 1.0


def test_set_path_is_type_checked():
    cfg = RunConfig()
    set_path(cfg, "train.steps", 12)
    assert cfg.train.steps == 12
    with pytest.raises(ConfigError):
        set_path(cfg, "train.steps", "abc")
    with pytest.raises(ConfigError):
        set_path(cfg, "train.nope", 1)
    with pytest.raises(ConfigError):
        set_path(cfg, "seed.x", 1)


def test_dump_is_yaml_mapping():
    assert set(yaml.safe_load(RunConfig().dump())) == {
        "seed", "deterministic", "data", "model", "train", "phase0", "ablation", "paths"}
