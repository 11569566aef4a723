from pathlib import Path

import pytest

from meladapt import config as cf
from meladapt.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def test_desk_defaults_round_trip(tmp_path):
    cfg = cf.desk_config()
    path = tmp_path / "echo.cfg"
    path.write_text(cf.config_text(cfg))
    assert cf.load_config(path) == cfg


def test_partial_file_keeps_defaults(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text("[source]\nsteps = 7\n")
    cfg = cf.load_config(p)
    assert cfg.source.steps == 7
    assert cfg.source.batch_size == cf.SourceOpts().batch_size
    assert cfg.model == cf.desk_config().model


def test_unknown_section_rejected(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("[mystery]\nx = 1\n")
    with pytest.raises(ConfigError):
        cf.load_config(p)


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("[source]\nstep_count = 7\n")
    with pytest.raises(ConfigError):
        cf.load_config(p)


def test_bad_value_type_rejected(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("[source]\nsteps = many\n")
    with pytest.raises(ConfigError):
        cf.load_config(p)
    p.write_text("[adapt]\nadapt_speaker_row = maybe\n")
    with pytest.raises(ConfigError):
        cf.load_config(p)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError):
        cf.load_config(tmp_path / "absent.cfg")


def test_cross_section_coherence_enforced(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("[oracle]\nmel_dim = 12\n")  # model still says 16
    with pytest.raises(ConfigError):
        cf.load_config(p)
    p.write_text("[corpus]\nn_speakers = 20\n")  # table only holds 10
    with pytest.raises(ConfigError):
        cf.load_config(p)


def test_shipped_desk_config_matches_defaults():
    cfg = cf.load_config(CONFIG_DIR / "desk.cfg")
    assert cfg == cf.desk_config()


def test_shipped_full_scale_config():
    cfg = cf.load_config(CONFIG_DIR / "fullscale.cfg")
    assert cfg.model.hidden_dim == 256
    assert cfg.model.n_heads == 2
    assert cfg.model.ffn_filter == 1024
    assert cfg.model.conv_kernel == 9
    assert cfg.model.mel_dim == 80
    assert cfg.adam.beta1 == 0.9
    assert cfg.adam.beta2 == 0.98
    assert cfg.adam.epsilon == 1e-9
    assert (cfg.source.steps, cfg.align.steps, cfg.adapt.steps) == (
        100000, 10000, 2000)


def test_plan_builders_thread_adam_settings(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("[adam]\nbeta2 = 0.95\n")
    cfg = cf.load_config(p)
    for plan in (cfg.source_plan(), cfg.align_plan(), cfg.adapt_plan()):
        assert plan.adam_beta2 == 0.95
    assert cfg.adapt_plan(steps=5, seed=9).steps == 5
    assert cfg.adapt_plan(steps=5, seed=9).seed == 9


def test_variant_plans_validate():
    cfg = cf.desk_config()
    assert "MelEncoder" in cfg.source_plan("joint_training").trainable_groups
    assert dict(cfg.align_plan("no_l2").loss_weights)["alignment"] == 0.0
    with pytest.raises(ConfigError):
        cfg.align_plan("finetune_mel_encoder_and_decoder")


def test_adapt_speaker_ids_follow_source_block():
    cfg = cf.desk_config()
    assert cfg.adapt_speaker_ids() == [8, 9]


def test_effective_config_echo(tmp_path):
    cfg = cf.desk_config(seed=5)
    target = cf.write_effective_config(cfg, tmp_path / "run")
    assert target.name == "effective.cfg"
    assert cf.load_config(target) == cfg
