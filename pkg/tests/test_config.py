import pytest

from d2pcca import config as cf
from d2pcca.errors import ConfigError


def test_defaults_follow_protocol():
    c = cf.RunConfig()
    assert c.variant == "d2pcca+kl+iaf"
    assert (c.data.window, c.data.step, c.batch_size) == (30, 1, 20)
    o = c.optimizer
    assert (o.lr, o.beta1, o.beta2, o.clip_norm, o.weight_decay, o.decay_mode) == (3e-4, 0.96, 0.999, 10.0, 2.0, "decoupled")
    assert (c.layout.shared_dim, c.layout.set_dim) == (1, 2)
    assert (c.anneal.initial, c.anneal.final, c.anneal.ramp_epochs) == (0.01, 1.0, 100)
    assert (c.flow.layers, c.flow.hidden) == (5, 70)


@pytest.mark.parametrize("variant", cf.VARIANTS)
def test_echo_round_trip(variant, tmp_path):
    c = cf.from_dict({"seed": 2**64 - 1, "data": {"table": "x.csv", "window": 12}}, variant)
    cf.dump_config(c, tmp_path / "c.yaml")
    assert cf.load_config(tmp_path / "c.yaml") == c


def test_sections_follow_variant():
    assert cf.from_dict({}, "d2pcca").flow is None
    assert cf.from_dict({}, "d2pcca").anneal is None
    assert cf.from_dict({}, "d2pcca+kl").anneal is not None
    assert cf.from_dict({}, "d2pcca+iaf").flow is not None
    assert cf.for_variant("dpcca-em").flow is None
    with pytest.raises(ConfigError, match="only apply to \\+iaf"):
        cf.from_dict({"variant": "d2pcca+kl", "flow": {"layers": 3}})
    assert cf.from_dict({"flow": {"layers": 3}}, "d2pcca+kl").flow is None
    with pytest.raises(ConfigError, match="needs a 'flow'"):
        cf.from_dict({"flow": None}, "d2pcca+iaf")
    with pytest.raises(ConfigError, match="only apply to \\+kl"):
        cf.from_dict({"variant": "d2pcca", "anneal": {}})


@pytest.mark.parametrize(
    "raw, msg",
    [
        ({"bogus": 1}, "unknown key"),
        ({"optimizer": {"learning_rate": 1}}, "optimizer: unknown key"),
        ({"variant": "d3pcca"}, "unknown variant"),
        ({"seed": -1}, "unsigned"),
        ({"optimizer": {"lr": -1.0}}, "learning rate"),
        ({"nets": {"transition": "rnn"}}, "gru"),
        ({"data": [1, 2]}, "expected a mapping"),
        ({"data": {"window": 0}}, "window"),
    ],
)
def test_bad_configs(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        cf.from_dict(raw)


def test_malformed_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: [1, 2\n")
    with pytest.raises(ConfigError, match="malformed"):
        cf.load_config(p)
    with pytest.raises(ConfigError, match="cannot read"):
        cf.load_config(tmp_path / "missing.yaml")


def test_manifest_defaults_next_to_table():
    assert cf.DataConfig(table="/a/b/panel.csv").manifest_path() == "/a/b/manifest.yaml"
    assert cf.DataConfig(table="/a/p.csv", manifest="/m.yaml").manifest_path() == "/m.yaml"
