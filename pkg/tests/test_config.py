import pytest

from diffem import config, gmm
from diffem.errors import ArgumentError


def test_em_block_defaults_and_overrides():
    cfg = config.em_config({"seed": 3, "em": {"T": 4, "eps_r": 0.1}}, fix_weights=True)
    assert cfg == gmm.EmConfig(4, True, True, 0.1, 3)


def test_validate_rejects_types_and_unknown_keys():
    with pytest.raises(ArgumentError):
        config.validate("fit", {"input": "x", "K": "3"})
    with pytest.raises(ArgumentError):
        config.validate("fit", {"input": "x", "K": 3, "em": {"iterations": 3}})
    with pytest.raises(ArgumentError):
        config.validate("texture", {"target": "t.png", "out_shape": [8]})
    with pytest.raises(ArgumentError):
        config.validate("nope", {})
    config.validate("flow", {"grad_method": "WARM", "optimizer": "adam"})


def test_load_errors(tmp_path):
    with pytest.raises(ArgumentError):
        config.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ArgumentError):
        config.load(tmp_path / "bad.json")


def test_unbalanced_block():
    assert config.unbalanced_config(None) is None
    assert config.unbalanced_config({"lambda0": 2.0}).lambda0 == 2.0
