from dataclasses import fields

import pytest

from fuzzyseg.config import (
    ConfigError,
    RunConfig,
    help_text,
    load_config,
    parse_config_text,
    parse_config_values,
)
from fuzzyseg.densecrf import CrfParams


def test_parse_with_comments_and_blanks():
    text = "# run\nseed = 7\n\nwidth=16   # narrower\nmembership = gaussian\n"
    cfg = parse_config_text(text)
    assert (cfg.seed, cfg.width, cfg.membership) == (7, 16, "gaussian")
    assert cfg.depth == RunConfig().depth


def test_round_trip():
    cfg = RunConfig(seed=3, crf=False, w1=0.25, context_l6="1, 2, 3")
    back = parse_config_text(cfg.to_text())
    assert back == cfg


@pytest.mark.parametrize(
    "text, match",
    [
        ("colour = red\n", r"<config>:1: unknown configuration key 'colour'"),
        ("seed = 1\nseed = 2\n", r"<config>:2: duplicate key 'seed'"),
        ("seed 1\n", r"<config>:1: expected 'key = value'"),
        ("seed = one\n", r"invalid value 'one' for seed \(expected int\)"),
        ("crf = maybe\n", r"invalid value 'maybe' for crf"),
    ],
)
def test_parse_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text)


@pytest.mark.parametrize("raw, value", [("true", True), ("ON", True), ("yes", True), ("0", False), ("off", False)])
def test_bool_coercion(raw, value):
    assert parse_config_text(f"crf = {raw}\n").crf is value


def test_update_rejects_unknown():
    with pytest.raises(ConfigError, match="unknown configuration key 'nope'"):
        RunConfig().update({"nope": "1"})


def test_defaults_follow_crf_params():
    cfg = RunConfig()
    p = cfg.crf_params()
    assert (p.w1, p.w2, p.w3, p.sigma_alpha) == (CrfParams.w1, CrfParams.w2, CrfParams.w3, CrfParams.sigma_alpha)
    assert RunConfig(crf_context=False).crf_params().w3 == 0.0


@pytest.mark.parametrize(
    "changes, match",
    [
        ({"membership": "triangle"}, "membership"),
        ({"fold": 10}, r"fold must be in 0\.\.9"),
        ({"w2": -1.0}, "w2"),
        ({"context_l3": "1, 2"}, "context_l3 must have three components"),
        ({"context_l1": "a, b, c"}, "context_l1 must be three comma-separated numbers"),
        ({"image_size": 30}, "divisible"),
    ],
)
def test_validation(changes, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig(**changes).validate()


def test_network_config_mapping():
    net = RunConfig(membership="none", wavelet=False, width=8).network_config()
    assert net.membership is None and net.in_channels == 1 and net.width == 8


def test_help_lists_every_key():
    text = help_text()
    for f in fields(RunConfig):
        assert f"  {f.name} = " in text


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 3\nbogus = 1\n")
    with pytest.raises(ConfigError, match=r"run\.cfg:2: unknown configuration key 'bogus'"):
        load_config(path)
    path.write_text("epochs = 3\n")
    assert load_config(path).epochs == 3
    assert parse_config_values("seed = 1\n") == {"seed": "1"}
