import configparser
import subprocess
import sys

import pytest

from carleman_lab import cli

FAST = {
    "synthesize-control": ["control.resolution=51", "control.check_resolution=15"],
    "energy-report": ["energy.resolution=41", "energy.ensemble=3", "energy.windows=20"],
    "verify-geometry": ["geometry.points=20", "geometry.conformal_points=10", "geometry.cases=2x1, 2x2"],
    "estimate-observability": ["observability.levels=41, 81", "observability.ensemble=10",
                               "observability.modes=4", "observability.interior=false",
                               "observability.probe_levels=51, 101"],
}


def run(command, tmp_path, *extra):
    args = [command, "-o", str(tmp_path)]
    for item in FAST.get(command, []) + list(extra):
        args += ["-s", item]
    return cli.main(args)


def bodies(path):
    return {p.name: [ln for ln in p.read_text().splitlines() if not ln.startswith("# generated")]
            for p in sorted(path.iterdir())}


@pytest.mark.parametrize("command", sorted(FAST))
def test_commands_pass(command, tmp_path):
    assert run(command, tmp_path) == 0
    assert (tmp_path / "resolved_config.ini").is_file()
    summaries = list(tmp_path.glob("*_summary.csv"))
    assert len(summaries) == 1
    text = summaries[0].read_text()
    assert text.startswith("# generated:") and f"# command: {command}" in text


@pytest.mark.parametrize("command", ["synthesize-control", "verify-geometry"])
def test_outputs_are_deterministic(command, tmp_path):
    run(command, tmp_path / "a")
    run(command, tmp_path / "b")
    assert bodies(tmp_path / "a") == bodies(tmp_path / "b")


def test_resolved_config_reloads(tmp_path):
    run("synthesize-control", tmp_path / "a")
    assert cli.main(["synthesize-control", "-c", str(tmp_path / "a" / "resolved_config.ini"),
                     "-o", str(tmp_path / "b")]) == 0
    assert bodies(tmp_path / "a") == bodies(tmp_path / "b")


def test_missing_config_exits_with_config_error(tmp_path):
    assert cli.main(["verify-geometry", "-c", str(tmp_path / "nope.ini")]) == 2


def test_unknown_key_rejected(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[control]\nfoo = 1\n")
    assert cli.main(["synthesize-control", "-c", str(cfg), "-o", str(tmp_path)]) == 2
    with pytest.raises(cli.ConfigError, match="unknown key"):
        cli.load_config(cfg)


def test_unknown_section_rejected(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[nonsense]\na = 1\n")
    with pytest.raises(cli.ConfigError, match="unknown section"):
        cli.load_config(cfg)


def test_bad_override_value_rejected(tmp_path):
    assert run("synthesize-control", tmp_path, "control.resolution=many") == 2


def test_regime_violation_exits_with_config_error(tmp_path, capsys):
    assert cli.main(["verify-carleman", "-o", str(tmp_path), "-s", "carleman.b=0.6"]) == 2
    assert "parameter regime violated" in capsys.readouterr().err


def test_failed_check_exits_with_one(tmp_path):
    assert run("synthesize-control", tmp_path, "control.max_iter=1", "control.tol=1e-9") == 1


def test_show_config_lists_every_key(capsys):
    assert cli.main(["show-config"]) == 0
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(capsys.readouterr().out)
    for section, keys in cli.SCHEMA.items():
        assert set(parser[section]) == set(keys)


def test_usage_error_exit_code():
    assert cli.main(["no-such-command"]) == 2


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "carleman_lab.cli", "--version"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip() == "0.1.0"
