"""Config parsing, validation paths, overrides, fingerprints."""

import json

import pytest

from fedlsm.config import (apply_overrides, config_from_dict, config_to_dict,
                           data_fingerprint, load_config)
from fedlsm.errors import ConfigError, ParseError


def minimal():
    return {"version": 1}


def test_defaults_build_and_validate():
    cfg = config_from_dict(minimal())
    assert cfg.mode == "fedlsm"
    assert cfg.rounds == 50
    assert cfg.client.tau == 0.95
    assert cfg.client.ema_decay == 0.999
    assert cfg.client.lr == pytest.approx(1e-4)
    assert cfg.federation.n_clients == 5


def test_version_checked():
    with pytest.raises(ConfigError, match="version"):
        config_from_dict({"version": 2})


def test_unknown_keys_name_their_path():
    with pytest.raises(ConfigError, match="config.rounds_total"):
        config_from_dict({"version": 1, "rounds_total": 10})
    with pytest.raises(ConfigError, match="federation.n_client"):
        config_from_dict({"version": 1, "federation": {"n_client": 3}})
    with pytest.raises(ConfigError, match="client.tau_x"):
        config_from_dict({"version": 1, "client": {"tau_x": 0.5}})
    with pytest.raises(ConfigError, match="client.augment.sigma"):
        config_from_dict({"version": 1,
                          "client": {"augment": {"sigma": 0.1}}})


def test_type_errors_name_their_path():
    with pytest.raises(ConfigError, match="client.lr"):
        config_from_dict({"version": 1, "client": {"lr": "fast"}})
    with pytest.raises(ConfigError, match="seeds"):
        config_from_dict({"version": 1, "seeds": [0.5]})
    with pytest.raises(ConfigError, match="federation.n_clients"):
        config_from_dict({"version": 1, "federation": {"n_clients": 2.5}})


def test_semantic_validation():
    with pytest.raises(ConfigError, match="seeds"):
        config_from_dict({"version": 1, "seeds": [1, 1]})
    with pytest.raises(ConfigError, match="mode"):
        config_from_dict({"version": 1, "mode": "thebest"})
    with pytest.raises(ConfigError, match="class_weights"):
        config_from_dict({"version": 1,
                          "client": {"class_weights": [1.0, 1.0]}})


def test_client_task_follows_federation():
    cfg = config_from_dict({"version": 1, "federation": {"task": "multi"}})
    assert cfg.client.task == "multi"
    with pytest.raises(ConfigError, match="task"):
        config_from_dict({"version": 1, "federation": {"task": "multi"},
                          "client": {"task": "single"}})


def test_overrides_patch_nested_keys():
    d = minimal()
    apply_overrides(d, ["client.lr=0.01", "mode=fedavg_full",
                        "federation.n_clients=4", "seeds=[1,2]"])
    cfg = config_from_dict(d)
    assert cfg.client.lr == 0.01
    assert cfg.mode == "fedavg_full"
    assert cfg.federation.n_clients == 4
    assert cfg.seeds == [1, 2]


def test_override_format_errors():
    with pytest.raises(ConfigError, match="key=value"):
        apply_overrides({}, ["norats"])
    with pytest.raises(ConfigError, match="empty key"):
        apply_overrides({}, ["=3"])


def test_fingerprint_tracks_data_not_mode():
    a = config_from_dict({"version": 1, "mode": "fedlsm"})
    b = config_from_dict({"version": 1, "mode": "fedavg_masked",
                          "client": {"lr": 0.5}})
    assert data_fingerprint(a) == data_fingerprint(b)
    c = config_from_dict({"version": 1, "federation": {"n_clients": 6}})
    assert data_fingerprint(a) != data_fingerprint(c)
    d = config_from_dict({"version": 1, "seeds": [5]})
    assert data_fingerprint(a) != data_fingerprint(d)
    # the standalone data seed only matters for gen-data, not for runs
    e = config_from_dict({"version": 1, "federation": {"seed": 99}})
    assert data_fingerprint(a) == data_fingerprint(e)


def test_config_roundtrips_through_dict():
    cfg = config_from_dict({"version": 1,
                            "client": {"class_weights": [1.0, 2.0, 1.0, 1.0,
                                                         1.0, 1.0, 3.0]}})
    again = config_from_dict(config_to_dict(cfg))
    assert config_to_dict(again) == config_to_dict(cfg)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  broken\n}")
    with pytest.raises(ParseError, match="bad.json:2"):
        load_config(str(bad))
    arr = tmp_path / "arr.json"
    arr.write_text("[1,2]")
    with pytest.raises(ConfigError, match="object"):
        load_config(str(arr))


def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "ok.json"
    path.write_text(json.dumps({"version": 1, "rounds": 7}))
    cfg = config_from_dict(load_config(str(path)))
    assert cfg.rounds == 7
