import pytest

from occlumesh.config import RunConfig, from_ini, load, to_ini
from occlumesh.contrast import Budget
from occlumesh.extractor import ConfigError


def test_defaults_are_desk_scale():
    cfg = RunConfig().validate()
    m, t = cfg.model, cfg.train
    assert (m.S, m.C, t.batch_size, t.lr, t.weight_decay) == (64, 128, 16, 1e-4, 1e-4)
    assert m.refine_layers == 3 and m.num_queries == 20 and t.tau == 0.07
    assert t.j2n_budget == Budget(100, 1024, 2048) and t.j2j_budget == Budget(100, 128, 256)


def test_round_trip_with_overrides(tmp_path):
    cfg = RunConfig(seed=9)
    cfg.model.C, cfg.model.smpl_token, cfg.model.lam_init = 32, False, 2.5
    cfg.train.j2j_budget = Budget(10, 4, 8)
    cfg.data.occlusion_mode = "person"
    text = to_ini(cfg)
    assert from_ini(text) == cfg
    assert to_ini(from_ini(text)) == text
    p = tmp_path / "c.ini"
    p.write_text(text)
    assert load(p) == cfg


def test_partial_file_takes_defaults():
    cfg = from_ini("[model]\nC = 64\n[train]\nj2n = false\n")
    assert cfg.model.C == 64 and not cfg.train.j2n and cfg.train.j2j and cfg.model.D == 8


@pytest.mark.parametrize("text", [
    "[model]\nbogus = 1\n",
    "[nope]\nx = 1\n",
    "[run]\ncolour = red\n",
    "[model]\nC = ten\n",
    "[train]\nj2n = maybe\n",
    "[train]\nj2n_budget = 1,2\n",
    "[model]\nC = 30\nheads = 4\n",
    "[model]\nfeat3d_mode = none\n",
    "[model]\nlam_init = 1.0\n",
    "[data]\nocclusion_mode = fog\n",
    "no section header\n",
])
def test_invalid_configs_rejected(text):
    with pytest.raises(ConfigError):
        from_ini(text)


def test_feat3d_none_allowed_without_contrast():
    cfg = from_ini("[model]\nfeat3d_mode = none\n[train]\nj2n = false\nj2j = false\n")
    assert cfg.model.feat3d_mode == "none"
