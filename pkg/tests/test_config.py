import pytest

from muse.config import Key, config_hash, floats, parse_config_text, read_config, validate
from muse.errors import ConfigError


def test_parse_comments_and_blanks():
    raw = parse_config_text("# header\n\na = 1  # trailing\n b=x , y \n")
    assert raw == {"a": "1", "b": "x , y"}


def test_duplicate_and_malformed():
    with pytest.raises(ConfigError) as err:
        parse_config_text("a = 1\na = 2\n")
    assert err.value.key == "a"
    with pytest.raises(ConfigError):
        parse_config_text("just words\n")
    with pytest.raises(ConfigError):
        parse_config_text("= 3\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        read_config(tmp_path / "none.cfg")


SCHEMA = {
    "sigma": Key(float, required=True),
    "mode": Key(str, default="gd", choices={"gd", "mm"}),
    "data": Key(str, path=True),
    "sigmas": Key(floats),
}


@pytest.mark.parametrize("raw,key", [
    ({"sigma": "1", "extra": "2"}, "extra"),
    ({}, "sigma"),
    ({"sigma": "abc"}, "sigma"),
    ({"sigma": "1", "mode": "lbfgs"}, "mode"),
    ({"sigma": "1", "data": "missing.bin"}, "data"),
])
def test_validate_errors_name_key(raw, key, tmp_path):
    with pytest.raises(ConfigError) as err:
        validate(raw, SCHEMA, tmp_path)
    assert err.value.key == key
    assert key in str(err.value)


def test_validate_defaults_and_paths(tmp_path):
    (tmp_path / "d.bin").write_bytes(b"")
    out = validate({"sigma": "0.5", "data": "d.bin", "sigmas": "2, 1,0.5"}, SCHEMA, tmp_path)
    assert out["sigma"] == 0.5 and out["mode"] == "gd"
    assert out["data"] == str(tmp_path / "d.bin")
    assert out["sigmas"] == [2.0, 1.0, 0.5]


def test_config_hash_order_independent():
    assert config_hash({"a": "1", "b": "2"}) == config_hash({"b": "2", "a": "1"})
    assert config_hash({"a": "1"}) != config_hash({"a": "2"})
