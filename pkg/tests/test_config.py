from importlib import resources

import pytest

from dpiqa.config import DATASET_PRESETS, ConfigError, RunConfig, build_config, parse_text, parse_value, validate


def test_defaults_match_published_values():
    cfg = build_config(environ={})
    assert cfg.model.timestep == 1 and cfg.model.cond_width == 768
    assert cfg.loss.lam == 0.25
    assert (cfg.teacher.lr, cfg.teacher.batch_size, cfg.teacher.max_epochs) == (1e-5, 12, 15)
    assert (cfg.student.lr, cfg.student.batch_size, cfg.student.max_epochs) == (1e-4, 24, 30)
    assert cfg.teacher.decay_factor == cfg.student.decay_factor == 0.2
    assert len(cfg.run.split_seeds) == 5
    assert cfg.model.qfd_channels == 512 and cfg.model.qfd_reduce == (512, 128, 32, 8)


def test_checked_in_defaults_file_matches_code():
    text = resources.files("dpiqa.resources").joinpath("defaults.cfg").read_text()
    pairs = parse_text(text)
    flat = RunConfig().to_flat()
    assert set(pairs) == set(flat)
    for key, value in pairs.items():
        assert parse_value(key, flat[key], value) == flat[key], key
    for name, preset in DATASET_PRESETS.items():
        assert f"# preset {name}:" in text


def test_presets():
    clive = build_config(overrides={"run.preset": "clive"}, environ={})
    assert clive.student.decay_epochs == (10, 25) and clive.teacher.decay_epochs == ()
    assert clive.teacher.val_step == 50
    koniq = build_config(environ={})
    assert koniq.teacher.decay_epochs == (5,) and koniq.student.decay_epochs == (5,)
    assert koniq.teacher.lr_at_epoch(5) == pytest.approx(2e-6)
    spaq = build_config(overrides={"run.preset": "spaq"}, environ={})
    assert spaq.student.decay_epochs == (6,)
    with pytest.raises(ConfigError, match="run.preset"):
        build_config(overrides={"run.preset": "imagenet"}, environ={})


def test_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("run.preset = clive\nteacher.lr = 3e-5\nteacher.batch_size = 16\nstudent.decay_epochs = 3\n")
    env = {"DPIQA_TEACHER__LR": "4e-5", "DPIQA_LOSS__LAMBDA": "0.5", "OTHER": "x"}
    cfg = build_config(path, {"teacher.lr": "5e-5"}, environ=env)
    assert cfg.teacher.lr == 5e-5
    assert cfg.loss.lam == 0.5
    assert cfg.teacher.batch_size == 16
    assert cfg.student.decay_epochs == (3,)
    assert cfg.teacher.val_step == 50


def test_errors_name_the_key(tmp_path):
    with pytest.raises(ConfigError, match="teacher.nope"):
        build_config(overrides={"teacher.nope": "1"}, environ={})
    with pytest.raises(ConfigError, match="teacher.batch_size"):
        build_config(overrides={"teacher.batch_size": "twelve"}, environ={})
    with pytest.raises(ConfigError, match="config"):
        build_config(overrides={"teacher.batch_size": "1"}, environ={})
    with pytest.raises(ConfigError, match="file not found"):
        build_config(tmp_path / "missing.cfg", environ={})
    cfg = build_config(environ={})
    with pytest.raises(ConfigError, match="data.train_manifest"):
        validate(cfg, need=("data.train_manifest",))
    cfg.data.train_manifest = str(tmp_path / "nope.csv")
    with pytest.raises(ConfigError, match="data.train_manifest"):
        validate(cfg, need=("data.train_manifest",))
    with pytest.raises(ConfigError, match="model.timestep"):
        validate(build_config(overrides={"model.timestep": "0"}, environ={}))
    with pytest.raises(ConfigError, match="model.weights_path"):
        validate(build_config(overrides={"model.backbone": "pretrained"}, environ={}))


def test_effective_config_round_trips(tmp_path):
    cfg = build_config(
        overrides={"run.preset": "livefb", "model.qfd_reduce": "64, 32, 8", "loss.lambda": "0.1", "teacher.max_steps": "7"},
        environ={},
    )
    cfg.write(tmp_path / "eff.cfg")
    again = build_config(tmp_path / "eff.cfg", environ={})
    assert again == cfg
    assert again.to_text() == cfg.to_text()


def test_model_config_picks_up_template(tmp_path):
    path = tmp_path / "tpl.txt"
    path.write_text("scenes = dog, other\ndistortions = other\nquality_levels = bad, good\n")
    cfg = build_config(overrides={"data.template": str(path)}, environ={})
    assert cfg.model_config().resolved_template().size == 4
    assert build_config(environ={}).model_config().resolved_template().size == 1530
