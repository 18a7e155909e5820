import subprocess
import sys

import pytest

from mvmap import cli, io, pipeline
from mvmap.config import PipelineConfig


def test_stage_before_its_inputs_exits_with_missing_artifact(tmp_path, capsys):
    code = cli.main(["eval", "--artifacts", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "missing artifact" in err and err.count("\n") == 1


def test_write_config_round_trips(tmp_path):
    path = tmp_path / "c.ini"
    assert cli.main(["write-config", str(path)]) == 0
    assert PipelineConfig.load(path).to_ini() == PipelineConfig().to_ini()


def test_bad_config_is_a_one_line_error(tmp_path, capsys):
    path = tmp_path / "c.ini"
    path.write_text("[nerf]\nlambda_tv = lots\n")
    assert cli.main(["synth", "--config", str(path), "--artifacts", str(tmp_path / "a")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("mvmap synth: error:") and err.count("\n") == 1
    assert cli.main(["synth", "--config", str(tmp_path / "nope.ini")]) == 1


def test_scene_list_parsing():
    assert cli._scene_list("scene21,22") == (21, 22)
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["synth", "--scenes", "x,y"])


def test_every_stage_has_a_subcommand_with_help():
    parser = cli.build_parser()
    for name in pipeline.STAGE_ORDER:
        assert parser.parse_args([name]).command == name
        assert pipeline.STAGES[name].__doc__


def test_console_script_runs():
    out = subprocess.run([sys.executable, "-m", "mvmap.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "train-nerf" in out.stdout


def test_synth_one_scene_writes_manifest_and_strict_check(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[scene]\nn_frames = 20\nwidth = 32\nheight = 24\n")
    art = tmp_path / "a"
    assert cli.main(["synth", "--config", str(cfg), "--artifacts", str(art), "--scenes", "11"]) == 0
    assert capsys.readouterr().out.startswith("synth: ")
    rec = io.read_manifest(art)[-1]
    assert rec["command"] == "synth" and rec["scenes"] == [11]
    assert all(k.startswith("scenes/scene11/") for k in rec["outputs"])
    assert (art / "scenes" / "scene11" / "poses.txt").exists()
    # a rerun gives the same bytes
    again = tmp_path / "b"
    cli.main(["synth", "--config", str(cfg), "--artifacts", str(again), "--scenes", "11"])
    assert io.read_manifest(again)[-1]["outputs"] == rec["outputs"]
    # tampering with an output is caught by a strict downstream stage
    victim = sorted((art / "scenes" / "scene11" / "rgb").iterdir())[0]
    victim.write_bytes(victim.read_bytes()[:-1] + b"\x01")
    code = cli.main(["train-nerf", "--config", str(cfg), "--artifacts", str(art), "--scenes", "11", "--strict"])
    assert code == 1
    assert "mismatch" in capsys.readouterr().err.lower()
