import json

import pytest

from pipeline_config import ConfigError, PipelineConfig, apply_overrides, load_config, with_seed


def test_defaults():
    config = load_config()
    assert config.topology == "mcts"
    assert config.sdf.resolution == 96
    assert config.symmetry.threshold_for(2.0) == pytest.approx(4e-3)


def test_load_config_merges_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"topology": "bfs", "search": {"max_iterations": 10}}), encoding="utf-8")
    config = load_config(path)
    assert config.topology == "bfs"
    assert config.search.max_iterations == 10
    assert config.search.exploration_constant == pytest.approx(1.414)


@pytest.mark.parametrize("content", ["{not json", json.dumps({"colour": "red"}),
                                     json.dumps({"sdf": {"resolution": 4}}),
                                     json.dumps({"sdf": {"padding_fraction": 0}})])
def test_load_config_errors(tmp_path, content):
    path = tmp_path / "config.json"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_apply_overrides_is_nested_and_skips_none():
    config = apply_overrides(PipelineConfig(), {"search": {"workers": 3}, "threads": None})
    assert config.search.workers == 3
    assert config.threads == 1
    with pytest.raises(ConfigError):
        apply_overrides(config, {"mesh_mode": "symlink"})


def test_with_seed_reaches_every_component():
    config = with_seed(PipelineConfig(), 7)
    assert (config.contact.seed, config.search.rng_seed, config.dwcavl.seed, config.symmetry.seed) == (7, 7, 7, 7)
