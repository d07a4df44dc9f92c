"""Config schema validation, overrides, and typed accessors."""

import json

import pytest

from densealign.config import DEFAULT_CONFIG, load_run_config
from densealign.exceptions import ConfigError


class TestLoading:
    def test_defaults_validate(self):
        cfg = load_run_config(None)
        assert cfg.seed == 0
        assert cfg.scoring_config().lam == 0.25
        assert cfg.scoring_config().roi_size == (14, 14)
        assert cfg.scoring_config().k == 144
        assert cfg.decoder_config().num_queries == 100
        assert cfg.train_settings().lr == 2e-4
        assert cfg.train_settings().weight_decay == 1e-4

    def test_file_merge(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 9, "scoring": {"lam": 0.5}}))
        cfg = load_run_config(path)
        assert cfg.seed == 9
        assert cfg.scoring_config().lam == 0.5
        assert cfg.scoring_config().tau == 0.01  # untouched default

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"scoring": {"lambda": 0.5}}))
        with pytest.raises(ConfigError, match="unknown config key"):
            load_run_config(path)

    def test_unknown_top_level_rejected(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"optimizer": {}}))
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_overrides(self):
        cfg = load_run_config(None, overrides=[("scoring.lam", "0.75"),
                                               ("train.mode", "object_align"),
                                               ("decoder.num_queries", "7")])
        assert cfg.scoring_config().lam == 0.75
        assert cfg.train_settings().mode == "object_align"
        assert cfg.decoder_config().num_queries == 7

    def test_override_unknown_path(self):
        with pytest.raises(ConfigError):
            load_run_config(None, overrides=[("scoring.nope", "1")])

    def test_invalid_values_are_config_errors(self):
        with pytest.raises(ConfigError):
            load_run_config(None, overrides=[("scoring.tau", "-1")]).scoring_config()
        with pytest.raises(ConfigError):
            load_run_config(None, overrides=[("scoring.k", "9999")]).scoring_config()

    def test_coco_requires_paths(self):
        with pytest.raises(ConfigError, match="vocab.file"):
            load_run_config(None, overrides=[("data.kind", "coco"),
                                             ("data.annotations", "/nonexistent.json")])

    def test_missing_path_rejected(self, tmp_path):
        vocab = tmp_path / "vocab.json"
        vocab.write_text(json.dumps({
            "categories": [{"name": "cat", "split": "base"}],
            "templates": ["a {}"]}))
        with pytest.raises(ConfigError, match="does not exist"):
            load_run_config(None, overrides=[
                ("data.kind", "coco"),
                ("data.annotations", "/nonexistent.json"),
                ("vocab.file", str(vocab))])

    def test_defaults_not_mutated(self):
        load_run_config(None, overrides=[("seed", "5")])
        assert DEFAULT_CONFIG["seed"] == 0

    def test_echo_is_deterministic(self):
        c1 = load_run_config(None, overrides=[("seed", "3")])
        c2 = load_run_config(None, overrides=[("seed", "3")])
        assert c1.echo_json() == c2.echo_json()
