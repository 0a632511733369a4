import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spiketta import augment, space
from spiketta.config import (
    ConfigError,
    ExperimentConfig,
    Method,
    apply_overrides,
    config_dict,
    load_config,
    parse_config,
    serialize_config,
)


def test_empty_text_is_default():
    assert parse_config("") == ExperimentConfig()
    assert parse_config("# only a comment\n\n   \n") == ExperimentConfig()


def test_dotted_key_sets_nested_field():
    cfg = parse_config("adapt.eta=0.1")
    assert cfg.adapt.eta == 0.1
    assert cfg.adapt.num_augments == ExperimentConfig().adapt.num_augments


def test_types_and_enums():
    cfg = parse_config(
        """
        method = noadapt     # trailing comment
        adapt.scope = global
        adapt.aggregation = stt
        corruption.kind = impulse_noise
        carry_state = true
        arch.conv_channels = 4, 8
        data.image_size = 16,16
        seed = 0x10
        """
    )
    assert cfg.method is Method.NO_ADAPT
    assert cfg.adapt.scope is space.Scope.GLOBAL
    assert cfg.adapt.aggregation is space.Aggregation.SPIKES_THROUGH_TIME
    assert cfg.corruption.kind is augment.Corruption.IMPULSE
    assert cfg.carry_state is True
    assert cfg.arch.conv_channels == (4, 8)
    assert cfg.data.image_size == (16, 16)
    assert cfg.seed == 16


def test_duplicate_key_names_key_and_line():
    with pytest.raises(ConfigError, match=r"line 3.*duplicate key 'adapt.eta'"):
        parse_config("adapt.eta=0.1\nseed=1\nadapt.eta=0.2\n")


def test_unknown_key_names_line():
    with pytest.raises(ConfigError, match=r"line 2.*unknown key 'adapt.etaa'"):
        parse_config("seed=1\nadapt.etaa=0.1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("adapt=3")  # a section, not a value


def test_malformed_and_type_errors():
    with pytest.raises(ConfigError, match="line 1.*key=value"):
        parse_config("adapt.eta 0.1")
    with pytest.raises(ConfigError, match="line 1.*bad value"):
        parse_config("adapt.num_augments=many")
    with pytest.raises(ConfigError, match="bad value"):
        parse_config("carry_state=maybe")
    with pytest.raises(ConfigError, match="bad value"):
        parse_config("adapt.scope=sideways")


def test_domain_validation_surfaces_as_config_error():
    with pytest.raises(ConfigError, match="bad value"):
        parse_config("adapt.num_augments=1")


def test_round_trip_of_default_and_modified():
    for cfg in (ExperimentConfig(), parse_config("adapt.eta=0.125\nmethod=noadapt\narch.dense_hidden=32,16\n")):
        assert parse_config(serialize_config(cfg)) == cfg


@settings(max_examples=60, deadline=None)
@given(
    eta=st.floats(1e-4, 1.0, allow_nan=False),
    m=st.integers(2, 256),
    seed=st.integers(0, 2**64 - 1),
    scope=st.sampled_from(list(space.Scope)),
    sev=st.integers(0, 5),
    flag=st.booleans(),
    out=st.text(st.characters(blacklist_characters="#\n\r", blacklist_categories=("Cs",)), max_size=12).map(str.strip),
)
def test_round_trip_property(eta, m, seed, scope, sev, flag, out):
    cfg = ExperimentConfig(
        seed=seed,
        output_dir=out,
        carry_state=flag,
        adapt=dataclasses.replace(ExperimentConfig().adapt, eta=eta, num_augments=m, scope=scope),
        corruption=dataclasses.replace(ExperimentConfig().corruption, severity=sev),
    )
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_overrides_report_their_source():
    with pytest.raises(ConfigError, match="--adapt.eta"):
        apply_overrides(ExperimentConfig(), [("adapt.eta", "x", None)], source="--adapt.eta")


def test_load_config_file(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("adapt.eta=0.2\n", encoding="utf-8")
    assert load_config(f).adapt.eta == 0.2


def test_config_dict_is_flat_strings():
    d = config_dict(ExperimentConfig())
    assert d["adapt.eta"] == repr(ExperimentConfig().adapt.eta)
    assert all(isinstance(v, str) for v in d.values())


def test_policy_follows_config():
    cfg = parse_config("adapt.augment_strength=7\naugment.mixture_width=2")
    pol = cfg.policy()
    assert pol.strength == 7 and pol.mixture_width == 2
