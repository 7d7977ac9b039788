import json

import pytest

from conftest import tiny_experiment
from drm.config import ABLATION_ROWS, DKT_ROWS, ConfigError, ExperimentConfig, ablation_configs, desk_config


def test_json_round_trip(tmp_path):
    cfg = tiny_experiment(use_T=False)
    path = tmp_path / "c.json"
    cfg.dump(path)
    back = ExperimentConfig.load(path)
    assert back == cfg
    assert back.to_json() == json.loads(path.read_text())


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        ExperimentConfig.from_json({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json({"model": {"d_model": 8, "nope": 2}})


def test_invalid_json_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        ExperimentConfig.load(path)


@pytest.mark.parametrize("kw", [
    {"task": "SGDet"},
    {"use_A": False, "use_C": True},
])
def test_validation(kw):
    with pytest.raises(ConfigError):
        tiny_experiment(**kw)


def test_dkt_validation():
    cfg = tiny_experiment()
    for field, value in (("mode", "Q"), ("threshold", -1), ("q_override", 0)):
        doc = cfg.to_json()
        doc["dkt"][field] = value
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(doc)


def test_disabling_contrastive_zeroes_its_weights():
    cfg = tiny_experiment(use_C=False)
    w = cfg.resolved_train().weights
    assert w.predicate == 0 and w.triplet == 0 and w.relation == cfg.train.weights.relation
    assert cfg.resolved_train().augment is True
    assert tiny_experiment(use_A=False, use_C=False).resolved_train().augment is False


def test_ablation_switches_reach_model():
    m = tiny_experiment(use_P=False).resolved_model()
    assert not m.use_predicate_encoder and m.use_triplet_encoder


def test_ablation_grid_has_eight_distinct_rows():
    cfgs = ablation_configs(tiny_experiment())
    assert len(cfgs) == len(ABLATION_ROWS) == 8
    assert len({c.run_id for c in cfgs}) == 8
    assert {(c.use_P, c.use_T, c.use_A, c.use_C) for c in cfgs} == {row[1:] for row in ABLATION_ROWS}
    assert all(c.dkt.mode == "none" for c in cfgs)
    assert [m for _, m in DKT_ROWS] == ["none", "P", "T", "PT"]


def test_desk_preset():
    cfg = desk_config(seed=3)
    assert cfg.seed == 3 and cfg.train.epochs == 6 and cfg.train.lr == 0.01
    with pytest.raises(ConfigError):
        desk_config(colour="blue")


def test_data_seed_defaults_to_seed():
    assert tiny_experiment(seed=5).effective_data_seed == 5
    assert tiny_experiment(seed=5, data_seed=1).effective_data_seed == 1
