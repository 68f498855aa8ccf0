from pathlib import Path

import pytest

from padapter import config as cf
from padapter.model import ModelConfig

ROOT = Path(__file__).resolve().parents[1]


def test_default_toml_mirrors_defaults():
    assert cf.load_config(ROOT / "configs" / "default.toml") == cf.DEFAULTS


def test_defaults_build_valid_objects():
    cfg = cf.load_config()
    assert isinstance(cf.model_config(cfg), ModelConfig)
    assert cf.task_spec(cfg).seed == 0
    assert cf.train_config(cfg).steps == 500


def test_overrides_parse_toml_values():
    cfg = cf.load_config(overrides=["adapter.kind=p_adapter", "adapter.mu=0.5", "adapter.positions=['ffn']",
                                    "train.steps = 7"], seed=4)
    assert cfg["adapter"]["kind"] == "p_adapter" and cfg["adapter"]["mu"] == 0.5
    assert cfg["adapter"]["positions"] == ["ffn"] and cfg["train"]["steps"] == 7 and cfg["seed"] == 4
    assert cf.DEFAULTS["adapter"]["kind"] == "adapter"


@pytest.mark.parametrize("bad", ["adapter.kindd=x", "nope=1", "model=3", "adapter.kind.x=1", "novalue"])
def test_unknown_or_malformed_overrides(bad):
    with pytest.raises(cf.ConfigError):
        cf.load_config(overrides=[bad])


def test_file_errors(tmp_path):
    with pytest.raises(cf.ConfigError, match="not found"):
        cf.load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\nlayers = 2")
    with pytest.raises(cf.ConfigError, match="bad.toml"):
        cf.load_config(bad)
    unknown = tmp_path / "unknown.toml"
    unknown.write_text("[model]\nlayerz = 2\n")
    with pytest.raises(cf.ConfigError, match="model.layerz"):
        cf.load_config(unknown)
    table = tmp_path / "table.toml"
    table.write_text("model = 3\n")
    with pytest.raises(cf.ConfigError, match="table"):
        cf.load_config(table)


def test_file_then_overrides(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text("seed = 9\n[train]\nsteps = 3\n")
    cfg = cf.load_config(f, ["train.steps=4"])
    assert cfg["seed"] == 9 and cfg["train"]["steps"] == 4


def test_invalid_values_become_config_errors():
    with pytest.raises(cf.ConfigError):
        cf.model_config(cf.load_config(overrides=["model.heads=3"]))
    with pytest.raises(cf.ConfigError):
        cf.task_spec(cf.load_config(overrides=["task.kind='sorting'"]))


def test_apply_cell_copies():
    base = cf.load_config()
    cell = {"adapter.positions": ["ffn"]}
    out = cf.apply_cell(base, cell)
    out["adapter"]["positions"].append("sa")
    assert cell["adapter.positions"] == ["ffn"] and base["adapter"]["positions"] == ["ffn", "sa", "ca"]


def test_ablation_grids_use_known_keys():
    base = cf.load_config()
    for grid in cf.ABLATION_GRIDS.values():
        cf.apply_cell(base, {k: v[0] for k, v in grid.items()})
