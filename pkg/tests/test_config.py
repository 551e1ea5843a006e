import dataclasses

import pytest

from tcsm.config import (RunConfig, apply_settings, genspec, load_config,
                         net_config, parse_config_text, resolved_text,
                         train_config, write_resolved)
from tcsm.data import GenSpec
from tcsm.errors import ConfigError
from tcsm.losses import RampUpSchedule
from tcsm.network import SegNetConfig


def test_defaults_cover_the_standard_run():
    run = load_config()
    assert run.num_images == 200
    assert run.image_size == 32
    assert run.labeled_fraction == 0.1
    assert run.val_fraction == 0.1
    assert run.batch_size == 10
    assert run.lr0 == 0.01
    assert run.momentum == 0.9
    assert run.mode == "semi"


def test_parse_config_text_basics():
    raw = parse_config_text(
        "# a comment\n"
        "\n"
        "epochs=5\n"
        "lr0=0.02  # inline note\n"
        "mode=supervised\n")
    assert raw == {"epochs": "5", "lr0": "0.02", "mode": "supervised"}


def test_parse_config_text_rejects_garbage_line():
    with pytest.raises(ConfigError) as err:
        parse_config_text("epochs 5\n", source="bad.txt")
    assert "bad.txt:1" in str(err.value)


def test_file_overrides_defaults(tmp_path):
    path = tmp_path / "run.txt"
    path.write_text("epochs=3\nseed=42\nantialias=false\n")
    run = load_config(path)
    assert run.epochs == 3
    assert run.seed == 42
    assert run.antialias is False
    assert run.batch_size == 10  # untouched default


def test_flags_override_file(tmp_path):
    path = tmp_path / "run.txt"
    path.write_text("epochs=3\nseed=42\n")
    run = load_config(path, {"epochs": "9"})
    assert run.epochs == 9
    assert run.seed == 42


def test_unknown_key_is_a_hard_error(tmp_path):
    path = tmp_path / "run.txt"
    path.write_text("epochz=3\n")
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert "epochz" in str(err.value)


def test_bad_value_reports_key():
    with pytest.raises(ConfigError) as err:
        apply_settings(RunConfig(), {"epochs": "three"}, "test")
    assert "epochs" in str(err.value)
    with pytest.raises(ConfigError):
        apply_settings(RunConfig(), {"antialias": "yes"}, "test")
    with pytest.raises(ConfigError):
        apply_settings(RunConfig(), {"epochs": "3.5"}, "test")


def test_missing_config_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.txt")


def test_tuple_fields_parse_comma_lists():
    run = apply_settings(RunConfig(), {
        "sweep_seeds": "3,4",
        "sweep_fractions": "0.5, 1.0",
        "sweep_modes": "semi",
    }, "test")
    assert run.sweep_seeds == (3, 4)
    assert run.sweep_fractions == (0.5, 1.0)
    assert run.sweep_modes == ("semi",)
    with pytest.raises(ConfigError):
        apply_settings(RunConfig(), {"sweep_seeds": ""}, "test")


def test_resolved_text_round_trips(tmp_path):
    run = apply_settings(RunConfig(), {
        "epochs": "7", "lr0": "0.05", "antialias": "false",
        "sweep_seeds": "5,6,7", "mode": "supervised",
    }, "test")
    write_resolved(run, tmp_path)
    text = (tmp_path / "config_resolved.txt").read_text()
    again = apply_settings(RunConfig(), parse_config_text(text), "resolved")
    assert again == run
    # sorted keys, one per line
    keys = [line.split("=")[0] for line in text.splitlines()]
    assert keys == sorted(keys)
    assert len(keys) == len(dataclasses.fields(RunConfig))


def test_resolved_text_is_deterministic():
    run = RunConfig()
    assert resolved_text(run) == resolved_text(RunConfig())


def test_genspec_projection():
    run = apply_settings(RunConfig(), {"num_images": "10", "seed": "99",
                                       "texture_sigma": "0.0"}, "test")
    spec = genspec(run)
    assert spec == GenSpec(num_images=10, texture_sigma=0.0, seed=99)


def test_net_config_projection():
    run = apply_settings(RunConfig(), {"base_channels": "4", "depth": "1",
                                       "dropout_rate": "0.2"}, "test")
    assert net_config(run) == SegNetConfig(base_channels=4, depth=1, dropout_rate=0.2)


def test_train_config_projection_with_auto_rampup():
    run = apply_settings(RunConfig(), {"epochs": "10", "mode": "supervised"}, "test")
    tc = train_config(run)
    assert tc.epochs == 10
    assert tc.mode == "supervised"
    assert tc.labeled_per_batch == 5
    assert tc.schedule == RampUpSchedule(k=1.0, rampup_epochs=8)
    assert tc.net == SegNetConfig()


def test_train_config_projection_with_explicit_rampup():
    run = apply_settings(RunConfig(), {"rampup_epochs": "4", "rampup_k": "0.5"}, "test")
    assert train_config(run).schedule == RampUpSchedule(k=0.5, rampup_epochs=4)


def test_train_config_rejects_invalid_combination():
    run = apply_settings(RunConfig(), {"labeled_per_batch": "99"}, "test")
    with pytest.raises(ConfigError):
        train_config(run)
    with pytest.raises(ConfigError):
        train_config(apply_settings(RunConfig(), {"mode": "bogus"}, "test"))


def test_duplicate_key_last_wins():
    raw = parse_config_text("epochs=3\nepochs=5\n")
    assert raw["epochs"] == "5"
