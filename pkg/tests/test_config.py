import pytest

from seqflow import experiments as ex
from seqflow.config import (
    ConfigError,
    RunConfig,
    load_config,
    parse_assignments,
    parse_text,
    to_text,
)


def test_defaults_round_trip():
    cfg = RunConfig()
    assert parse_text(to_text(cfg)) == cfg
    assert (cfg.steps, cfg.buffer_capacity, cfg.behavior_temp_min, cfg.behavior_temp_max) == (1000, 50, 0.5, 2.0)
    assert (cfg.eval_temperature, cfg.eval_samples) == (0.1, 10)


def test_file_with_comments(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# a run\ntask = infill\nsteps = 12   # short\n\npolicy_hidden = none\nrecord_wall_time = true\n")
    cfg = load_config(p)
    assert (cfg.task, cfg.steps, cfg.policy_hidden, cfg.record_wall_time) == ("infill", 12, None, True)


@pytest.mark.parametrize("text", ["stpes = 3", "steps = three", "task = chess", "lr", "record_wall_time = maybe",
                                  "answer_mode = best", "batch_size = 0"])
def test_bad_config_is_rejected(text):
    with pytest.raises(ConfigError):
        parse_text(text)


def test_assignments_layer_on_presets():
    cfg = parse_assignments(["steps=7", ("lr", "0.5")], ex.preset("rng"))
    assert (cfg.task, cfg.steps, cfg.lr, cfg.batch_size) == ("rng", 7, 0.5, 64)
    with pytest.raises(ConfigError):
        parse_assignments(["steps"])


def test_presets_are_valid_and_named_after_tasks():
    for name in ex.PRESETS:
        assert ex.preset(name).task == name
    assert ex.preset("rng", steps=3).steps == 3


def test_seed_streams_are_distinct_and_stable():
    s = ex.seed_streams(0)
    assert s == ex.seed_streams(0) and len(set(s.values())) == len(s)
    assert s != ex.seed_streams(1)
