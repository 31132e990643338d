from pathlib import Path

import pytest

from atomgfn.config import ConfigError, RunConfig, dump, load, loads

TOY = Path(__file__).resolve().parents[1] / "demos" / "configs" / "toy.cfg"


def test_defaults_round_trip():
    cfg = RunConfig()
    assert loads(dump(cfg)) == cfg
    assert loads(dump(cfg)).digest() == cfg.digest()


def test_toy_config_loads_and_round_trips():
    cfg = load(TOY)
    assert cfg.mdp.elements == ("C", "O")
    assert cfg.mdp.chirality is False
    assert cfg.conditionals.props == ("MolWt",)
    assert cfg.conditionals.entry("MolWt")["range"] == (28.0, 32.0)
    assert cfg.context().encoding_size == 2 * 16 + 3
    assert loads(cfg.dump()) == cfg


def test_comments_and_optional_none():
    cfg = loads("# a comment\n\ndata.dataset = none\ntraining.seed_scaffold =\n")
    assert cfg.data.dataset is None and cfg.training.seed_scaffold is None
    cfg = loads("data.dataset = corpus.smi")
    assert cfg.data.dataset == "corpus.smi"


def test_typed_values():
    cfg = loads("training.max_num_iter = 1_000\ntraining.beta = 32\nmdp.chirality = no\n"
                "mdp.bond_orders = 1, 2")
    assert cfg.training.max_num_iter == 1000
    assert cfg.training.beta == 32.0
    assert cfg.mdp.chirality is False
    assert cfg.mdp.bond_orders == (1, 2)


@pytest.mark.parametrize("text", [
    "model.nonsense = 1",
    "bogus.key = 1",
    "training = 3",
    "no equals sign here",
    "conditionals.QED.colour = red",
])
def test_unknown_keys_rejected(text):
    with pytest.raises(ConfigError):
        loads(text)


@pytest.mark.parametrize("text", [
    "training.max_num_iter = many",
    "mdp.chirality = maybe",
    "training.mix_ratio = 1.5",
    "training.beta = 0",
    "training.bootstrap_own_reward = true",
    "training.objective = dpo",
    "conditionals.QED.range = 0.5",
    "conditionals.props = Weird",
])
def test_bad_values_rejected(text):
    with pytest.raises(ConfigError):
        loads(text)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load(tmp_path / "absent.cfg")


def test_conditional_overrides_keep_other_defaults():
    cfg = loads("conditionals.TPSA.lambda = 2")
    e = cfg.conditionals.entry("TPSA")
    assert e["lambda"] == 2.0
    assert e["range"] == RunConfig().conditionals.entry("TPSA")["range"]
    assert loads(cfg.dump()) == cfg
