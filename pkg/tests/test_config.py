import json

import pytest

from fedda.config import FederationConfig, apply_override, config_from_dict, load_config
from fedda.errors import ConfigError


def test_defaults():
    c = config_from_dict({})
    assert (c.beta1, c.beta2, c.eps, c.mu) == (0.9, 0.99, 0.1, 0.0)
    assert c.stabilization.local_steps == 1 and c.stabilization.full_batch
    assert c.participants == c.num_clients


def test_unknown_keys_name_the_dotted_path():
    with pytest.raises(ConfigError) as err:
        config_from_dict({"data": {"klients": 3}})
    assert err.value.key == "data.klients"


def test_type_errors_name_the_key():
    with pytest.raises(ConfigError) as err:
        config_from_dict({"rounds": "ten"})
    assert err.value.key == "rounds"
    with pytest.raises(ConfigError):
        config_from_dict({"record_timing": 1})


@pytest.mark.parametrize("raw,key", [
    ({"clients_per_round": 3}, "clients_per_round"),
    ({"local_steps": 0}, "local_steps"),
    ({"beta1": 1.0}, "beta1"),
    ({"algorithm": "fedsomething"}, "algorithm"),
    ({"mu": 0.1}, "mu"),
    ({"model": {"kind": "logistic"}}, "model.kind"),
    ({"data": {"kind": "csv"}, "model": {"kind": "logistic"}}, "data.path"),
])
def test_validation(raw, key):
    with pytest.raises(ConfigError) as err:
        config_from_dict(raw)
    assert err.value.key == key


def test_stabilization_start_defaults_to_last_tenth():
    c = config_from_dict({"rounds": 25, "stabilization": {"enabled": True}})
    assert c.stabilization_start == 22
    assert config_from_dict({"rounds": 25}).stabilization_start is None


def test_hash_tracks_content():
    a, b = FederationConfig(), FederationConfig()
    assert a.hash() == b.hash()
    b.lr = 0.2
    assert a.hash() != b.hash()


def test_round_trip_through_dict():
    c = config_from_dict({"algorithm": "fedda_adam", "data": {"kind": "synthetic", "dim": 3},
                          "model": {"kind": "mlp", "hidden": [4]}})
    assert config_from_dict(c.to_dict()).hash() == c.hash()


def test_load_config_errors_mention_path(tmp_path):
    with pytest.raises(ConfigError) as err:
        load_config(tmp_path / "missing.json")
    assert "missing.json" in str(err.value)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError) as err:
        load_config(bad)
    assert "bad.json" in str(err.value)


def test_load_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"rounds": 3}))
    assert load_config(p).rounds == 3


def test_overrides():
    raw = apply_override({}, "data.clients=4")
    raw = apply_override(raw, "algorithm=fedavg")
    assert raw == {"data": {"clients": 4}, "algorithm": "fedavg"}
    with pytest.raises(ConfigError):
        apply_override({}, "no-equals-sign")
