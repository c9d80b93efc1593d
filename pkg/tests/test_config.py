import pytest

from pointhr.config import PRESETS, ConfigError, ModelConfig, format_config, load_config, parse_config


def test_preset_tuples():
    assert PRESETS["T"].modules == (1, 1, 2, 1) and PRESETS["T"].channels == (64, 16, 16, 16)
    assert PRESETS["S"].modules == (1, 1, 3, 2) and PRESETS["S"].channels == (64, 16, 16, 16)
    assert PRESETS["B"].modules == (1, 1, 3, 2) and PRESETS["B"].channels == (64, 32, 32, 32)
    assert PRESETS["L"].modules == (1, 1, 5, 4) and PRESETS["L"].channels == (64, 32, 32, 32)
    for cfg in PRESETS.values():
        assert cfg.blocks == (2, 2, 2, 2)
        assert cfg.neighbors == (16,) * 4
        assert cfg.grid_sizes == (0.1, 0.2, 0.4, 0.8)


def test_branch_width_doubles():
    cfg = PRESETS["L"]
    assert [cfg.width(4, j) for j in range(1, 5)] == [32, 64, 128, 256]
    assert cfg.width(1, 1) == 64


def test_stem_uses_first_branch_k():
    cfg = ModelConfig(neighbors=(5, 6, 7, 8))
    assert cfg.knn_k(0) == 5 and cfg.knn_k(1) == 5 and cfg.knn_k(4) == 8


@pytest.mark.parametrize("changes", [
    dict(modules=(1, 1, 1)),
    dict(blocks=(0, 2, 2, 2)),
    dict(grid_sizes=(0.1, 0.1, 0.4, 0.8)),
    dict(grid_sizes=(0.0, 0.2, 0.4, 0.8)),
    dict(operator="conv"),
    dict(decoder="fpn"),
    dict(groups=(3, 8, 16, 32)),
    dict(num_classes=0),
])
def test_invalid_configs_rejected(changes):
    with pytest.raises(ConfigError):
        ModelConfig(**changes)


def test_parse_roundtrip():
    cfg = PRESETS["S"].replace(operator="mlp", decoder="sum", pos_encoding=True, num_classes=13)
    assert parse_config(format_config(cfg)) == cfg


def test_parse_preset_and_overrides(tmp_path):
    text = "# tiny\npreset = T\noperator = va   # plain vector attention\nneighbors = 8, 8, 8, 8\n"
    cfg = parse_config(text)
    assert cfg.modules == (1, 1, 2, 1) and cfg.operator == "va" and cfg.neighbors == (8,) * 4
    path = tmp_path / "tiny.cfg"
    path.write_text(text)
    assert load_config(path) == cfg
    assert load_config("b") == PRESETS["B"]


@pytest.mark.parametrize("text", ["modules 1 1 1 1", "colour = red", "blocks = 2, x, 2, 2",
                                  "preset = XL", "pos_encoding = maybe"])
def test_parse_errors_name_the_line(text):
    with pytest.raises(ConfigError, match="line 1"):
        parse_config(text)
