import pytest

from msblackoil.config import (METHODS, SimulationConfig, dump_config, load_config, parse_config)
from msblackoil.errors import ConfigurationError


def test_empty_text_is_the_default_benchmark():
    cfg = parse_config("")
    assert cfg == SimulationConfig()
    assert (cfg.grid.nx_fine, cfg.grid.ny_fine, cfg.grid.refinement_ratio) == (60, 20, 10)
    assert cfg.schedule.end_time == 100.0 and cfg.method.name in METHODS
    assert cfg.initial.s_w == pytest.approx(0.25)


def test_round_trip_with_changes():
    cfg = (SimulationConfig().replace("method", name="gmsfem", derefine=False, basis_count=0)
           .replace("schedule", snapshot_times=(1.0, 2.5), end_time=5.0)
           .replace("fluid", beta=0.0))
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize("text,value", [("yes", True), ("off", False), ("1", True), ("FALSE", False)])
def test_boolean_spellings(text, value):
    assert parse_config(f"[method]\nderefine = {text}\n").method.derefine is value


def test_every_problem_is_reported_at_once():
    text = "[grid]\nnx_fine = abc\n[wells]\nrate = 3\n[bogus]\nx = 1\n[method]\nderefine = maybe\n"
    with pytest.raises(ConfigurationError) as info:
        parse_config(text)
    msg = str(info.value)
    for part in ("nx_fine", "unknown key 'rate'", "unknown section [bogus]", "boolean"):
        assert part in msg


def test_cross_field_validation():
    with pytest.raises(ConfigurationError, match="divisible"):
        parse_config("[grid]\nnx_fine = 7\n")
    with pytest.raises(ConfigurationError, match="snapshot_times"):
        parse_config("[schedule]\nend_time = 10\nsnapshot_times = 25\n")
    with pytest.raises(ConfigurationError, match="path"):
        parse_config("[permeability]\nsource = file\n")
    with pytest.raises(ConfigurationError):
        parse_config("[method]\nname = upscaled\n")
    with pytest.raises(ConfigurationError):
        parse_config("[rock]\nkrw_max = 2\n")
    with pytest.raises(ConfigurationError):
        SimulationConfig().replace("initial", s_o=0.9)


def test_malformed_and_missing_files(tmp_path):
    with pytest.raises(ConfigurationError, match="malformed"):
        parse_config("no section header\n")
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "absent.ini")
    path = tmp_path / "ok.ini"
    path.write_text("[time]\ndt_max = 2.0\n")
    assert load_config(path).time.dt_max == 2.0
