import pytest
import jsonschema

from dfa.config import (SCHEMA, ConfigValidationError, ExperimentConfig, from_dict, load_config,
                        parse_override)

MINIMAL = "dataset:\n  n_classes: 4\n  dim: 2\n"


def write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_documented_defaults(tmp_path):
    cfg = load_config(write(tmp_path, MINIMAL), environ={})
    assert cfg.model.temperature == 0.05
    assert cfg.pseudo.tau_p == 0.07
    assert cfg.bank.gamma == 0.1
    assert cfg.pseudo.eps_ent == 0.5
    assert (cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay) == (0.01, 0.9, 0.0005)
    assert (cfg.loss.alpha1, cfg.loss.alpha2, cfg.loss.alpha3) == (1.0, 1.0, 1.0)


def test_missing_required_key_is_named(tmp_path):
    p = write(tmp_path, "mode: dfa\ndataset:\n  dim: 2\n")
    with pytest.raises(ConfigValidationError) as err:
        load_config(p, environ={})
    assert err.value.key == "dataset.n_classes"
    assert "dataset.n_classes" in str(err.value)
    assert err.value.line == 3


def test_unknown_key_reports_its_line(tmp_path):
    p = write(tmp_path, MINIMAL + "optim:\n  lr: 0.1\n  learning_rate: 0.2\n")
    with pytest.raises(ConfigValidationError) as err:
        load_config(p, environ={})
    assert err.value.key == "optim.learning_rate"
    assert err.value.line == 6
    assert f"{p}:6:" in str(err.value)


def test_bad_value_reports_its_line(tmp_path):
    p = write(tmp_path, MINIMAL + "bank:\n  gamma: 1.5\n")
    with pytest.raises(ConfigValidationError) as err:
        load_config(p, environ={})
    assert err.value.line == 5 and err.value.key == "bank.gamma"


def test_odd_batch_rejected(tmp_path):
    with pytest.raises(ConfigValidationError):
        load_config(write(tmp_path, MINIMAL + "optim:\n  batch_size: 7\n"), environ={})


def test_overrides_and_aliases(tmp_path):
    cfg = load_config(write(tmp_path, MINIMAL), ["alpha1=0", "optim.lr=1e-3", "mode=s+t", "hidden=[8, 8]"],
                      environ={})
    assert cfg.loss.alpha1 == 0.0 and isinstance(cfg.loss.alpha1, float)
    assert cfg.optim.lr == 1e-3
    assert cfg.mode == "s+t"
    assert cfg.model.hidden == [8, 8]


def test_ambiguous_alias():
    with pytest.raises(ConfigValidationError, match="ambiguous"):
        parse_override("radius=1")


def test_env_overrides(tmp_path):
    env = {"DFA__OPTIM__ITERATIONS": "7", "DFA__GAMMA": "0.25", "OTHER": "x"}
    cfg = load_config(write(tmp_path, MINIMAL), environ=env)
    assert cfg.optim.iterations == 7 and cfg.bank.gamma == 0.25
    # command line wins over environment
    cfg = load_config(write(tmp_path, MINIMAL), ["gamma=0.5"], environ=env)
    assert cfg.bank.gamma == 0.5


def test_invalid_override_is_flagged(tmp_path):
    with pytest.raises(ConfigValidationError, match="override"):
        load_config(write(tmp_path, MINIMAL), ["lr=-1"], environ={})


def test_resolved_yaml_round_trip(tmp_path):
    cfg = load_config(write(tmp_path, MINIMAL), ["seeds=[1, 2]"], environ={})
    p = write(tmp_path, cfg.to_yaml(), "resolved.yaml")
    again = load_config(p, environ={})
    assert again == cfg and again.config_hash() == cfg.config_hash()


def test_published_schema_is_valid_json_schema():
    jsonschema.Draft7Validator.check_schema(SCHEMA)
    assert SCHEMA["properties"]["dataset"]["required"] == ["n_classes", "dim"]


def test_replace_keeps_original():
    cfg = from_dict({"dataset": {"n_classes": 3, "dim": 2}})
    other = cfg.replace(**{"bank.gamma": 0.75})
    assert cfg.bank.gamma == 0.1 and other.bank.gamma == 0.75
    assert isinstance(other, ExperimentConfig)
