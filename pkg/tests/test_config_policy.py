import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlstestbed.client.config import (
    FIG4_EXAMPLE,
    BadValue,
    ClientConfig,
    MissingKey,
    UnknownKey,
    format_config,
    parse_config,
)
from mlstestbed.client.policy import UpdaterPolicy, policy_allows


def _with(text: str, old: str, new: str) -> str:
    assert old in text
    return text.replace(old, new)


def test_example_listing_parses():
    cfg = parse_config(FIG4_EXAMPLE)
    assert cfg.join_chance == 0.01
    assert cfg.proposals_per_commit == 4
    assert cfg.auth_policy == "Random"
    assert cfg.replicas == 10
    assert cfg.groups == ("group_1", "group_2")
    assert cfg.mqtt_url == "tcp://<ip>:<port>"


def test_modification_chances_summing_to_one_are_valid():
    cfg = parse_config(FIG4_EXAMPLE)
    assert (cfg.invite_chance, cfg.remove_chance, cfg.update_chance) == (0.6, 0.1, 0.3)


def test_chances_not_summing_to_one_rejected():
    text = FIG4_EXAMPLE
    for key in ("invite_chance = 0.6", "remove_chance = 0.1", "update_chance = 0.3"):
        text = _with(text, key, key.split("=")[0] + "= 0.5")
    with pytest.raises(BadValue):
        parse_config(text)


def test_missing_key():
    with pytest.raises(MissingKey):
        parse_config(_with(FIG4_EXAMPLE, "replicas = 10\n", ""))


def test_unknown_key_and_section():
    with pytest.raises(UnknownKey):
        parse_config(_with(FIG4_EXAMPLE, "replicas = 10", "replicas = 10\ncolour = 3"))
    with pytest.raises(UnknownKey):
        parse_config(FIG4_EXAMPLE + "\n[extra]\nx = 1\n")


def test_url_sections_optional():
    text = FIG4_EXAMPLE.replace('[http_server]\nurl = "http://<ip>:<port>"\n', "")
    assert parse_config(text).http_url is None


@pytest.mark.parametrize("old,new", [
    ("join_chance = 0.01", "join_chance = 1.5"),
    ("join_chance = 0.01", 'join_chance = "often"'),
    ('ds = "mqtt"', 'ds = "carrier-pigeon"'),
    ('auth_policy = "Random"', 'auth_policy = "Oldest"'),
    ('paradigm = "propose"', 'paradigm = "vote"'),
    ("proposals_per_commit = 4", "proposals_per_commit = 0"),
    ("sleep_millis_min = 20000", "sleep_millis_min = 70000"),
    ("message_length_max = 2000", "message_length_max = 2000.5"),
    ("external_join = true", "external_join = 1"),
    ('groups = ["group_1", "group_2"]', 'groups = ["group 1"]'),
    ('groups = ["group_1", "group_2"]', "groups = []"),
])
def test_bad_values(old, new):
    with pytest.raises(BadValue):
        parse_config(_with(FIG4_EXAMPLE, old, new))


def test_not_toml():
    with pytest.raises(BadValue):
        parse_config("[cgka\nds =")


def test_format_round_trip():
    cfg = parse_config(FIG4_EXAMPLE)
    assert parse_config(format_config(cfg)) == cfg


@given(st.floats(0, 1), st.floats(0, 1))
def test_property_valid_splits_round_trip(a, b):
    invite, remove = a, b * (1 - a)
    update = 1.0 - invite - remove
    cfg = ClientConfig(invite_chance=invite, remove_chance=remove, update_chance=update,
                       join_chance=b, message_chance=a)
    assert parse_config(format_config(cfg)) == cfg


# -- policy ---------------------------------------------------------------------

ORDER = ["creator", "second", "third"]


def test_first_only_creator():
    assert policy_allows("First", "creator", ORDER)
    assert not policy_allows("First", "second", ORDER)
    assert not policy_allows("First", "third", ORDER)


def test_last_only_newest_and_moves_on_join():
    assert policy_allows("Last", "third", ORDER)
    assert not policy_allows("Last", "creator", ORDER)
    grown = ORDER + ["fourth"]
    assert not policy_allows("Last", "third", grown)
    assert policy_allows("Last", "fourth", grown)


def test_random_allows_every_member():
    assert all(policy_allows(UpdaterPolicy.RANDOM, m, ORDER) for m in ORDER)


def test_non_member_never_allowed():
    for p in UpdaterPolicy:
        assert not policy_allows(p, "stranger", ORDER)


def test_policy_parse_case_insensitive():
    assert UpdaterPolicy.parse("last") is UpdaterPolicy.LAST
    with pytest.raises(ValueError):
        UpdaterPolicy.parse("middle")
