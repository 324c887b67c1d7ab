import json

import pytest

from latentmotion.config import (
    SEED_ENV,
    RunConfig,
    apply_overrides,
    config_from_dict,
    default_seed,
    load_config,
)
from latentmotion.errors import ConfigError


def test_defaults_round_trip():
    cfg = RunConfig()
    data = json.loads(json.dumps(cfg.to_dict()))
    assert data["train"]["epochs"] == 350 and data["train"]["ema_momentum"] == 0.995
    assert data["loss"] == {"lambda_gp": 50.0, "lambda_gap": 100.0}
    assert config_from_dict(data) == cfg


def test_partial_sections_use_defaults():
    cfg = config_from_dict({"model": {"layers": 4, "dim": 16}, "dataset": "x"})
    assert cfg.model.layers == 4 and cfg.model.hidden_dim == 32
    assert cfg.train.batch_size == 16 and cfg.dataset == "x"


@pytest.mark.parametrize("data,field", [
    ({"train": {"epochs": "ten"}}, "train.epochs"),
    ({"train": {"bogus": 1}}, "train.bogus"),
    ({"model": {"layers": 1.5}}, "model.layers"),
    ({"loss": {"lambda_gp": True}}, "loss.lambda_gp"),
    ({"optim": {}}, "optim"),
])
def test_schema_errors_name_the_field(data, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        config_from_dict(data)


def test_semantic_validation_propagates():
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"ema_momentum": 1.5}})
    with pytest.raises(ConfigError):
        config_from_dict({"eval": {"metric": "is"}})


def test_int_accepted_for_float_field():
    cfg = config_from_dict({"loss": {"lambda_gap": 0}, "train": {"learning_rate_gen": 1}})
    assert cfg.loss.lambda_gap == 0.0 and cfg.train.learning_rate_gen == 1


def test_overrides():
    data = apply_overrides({"train": {"epochs": 3}}, ["train.epochs=7", "model.layers=2", "dataset=/d",
                                                       "eval.extractor=identity-flatten"])
    assert data["train"]["epochs"] == 7 and data["model"]["layers"] == 2
    assert data["dataset"] == "/d" and data["eval"]["extractor"] == "identity-flatten"
    with pytest.raises(ConfigError):
        apply_overrides({}, ["noequals"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["epochs=3"])


def test_overrides_do_not_mutate_input():
    data = {"train": {"epochs": 3}}
    apply_overrides(data, ["train.epochs=9"])
    assert data["train"]["epochs"] == 3


def test_load_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"epochs": 2}}))
    assert load_config(p).train.epochs == 2
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert default_seed() == 0
    monkeypatch.setenv(SEED_ENV, "17")
    assert default_seed() == 17
    assert default_seed(3) == 3
    monkeypatch.setenv(SEED_ENV, "abc")
    with pytest.raises(ConfigError):
        default_seed()
