import json
import subprocess
import sys
from pathlib import Path

import numba
import numpy as np
import pytest

from nel_pose import harness as hn
from nel_pose.cli import main, set_threads
from nel_pose.config import ConfigError, default_text, load_experiment, read_config, render_config

REPO = Path(__file__).resolve().parents[1]
FAST = ["--set", "experiment.n_scenes=1", "--verbosity", "0"]


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def test_defaults_match_the_dataclasses():
    exp, _ = load_experiment(None)
    assert exp == hn.Experiment()


def test_shipped_config_documents_every_default():
    text = (REPO / "configs" / "default.cfg").read_text()
    assert text == render_config(default_text())
    exp, _ = load_experiment(str(REPO / "configs" / "default.cfg"))
    assert exp == hn.Experiment()


def test_round_trip_through_rendered_text(tmp_path):
    raw = read_config(None, ["scene.depth_noise=0.5", "likelihood.patch=full", "embed.symmetric_classes=1"])
    path = tmp_path / "a.cfg"
    path.write_text(render_config(raw))
    exp, raw2 = load_experiment(str(path))
    assert raw2 == raw
    assert exp.scene.depth_noise == 0.5
    assert exp.likelihood.patch is None
    assert exp.embed.symmetric_classes == (1,)


def test_overrides_beat_the_file(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("[experiment]\nseed = 4\nn_scenes = 3\n")
    exp, _ = load_experiment(str(path), ["experiment.seed=9"])
    assert (exp.seed, exp.n_scenes) == (9, 3)


def test_unknown_key_is_named(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("[scene]\ndepth_nois = 1.0\n")
    with pytest.raises(ConfigError, match=r"scene\.depth_nois"):
        load_experiment(str(path))
    with pytest.raises(ConfigError, match=r"\[nosuch\]"):
        load_experiment(None, ["nosuch.key=1"])


def test_bad_values_are_named():
    with pytest.raises(ConfigError, match=r"camera\.width"):
        load_experiment(None, ["camera.width=wide"])
    with pytest.raises(ConfigError, match=r"\[scene\]"):
        load_experiment(None, ["scene.dropout=2"])
    with pytest.raises(ConfigError, match="section.key=value"):
        load_experiment(None, ["seed=3"])


def test_missing_file_names_the_path(tmp_path):
    with pytest.raises(ConfigError, match="nothere.cfg"):
        load_experiment(str(tmp_path / "nothere.cfg"))


def test_phases_follow_the_phase_count():
    exp, raw = load_experiment(None, ["search.phases=2", "phase.2.kind=random_walk", "phase.2.k=5"])
    assert [p.kind for p in exp.schedule.phases] == ["hypotheses", "random_walk"]
    assert exp.schedule.phases[1].k == 5
    assert "phase.3" not in raw
    with pytest.raises(ConfigError, match=r"\[phase\.5\]"):
        load_experiment(None, ["search.phases=5"])
    exp, _ = load_experiment(None, ["search.phases=5", "phase.5.kind=icp"])
    assert exp.schedule.phases[4].kind == "icp"


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def run(argv, capsys):
    rc = main(argv)
    out, err = capsys.readouterr()
    return rc, out, err


def test_estimate_is_repeatable(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["estimate", "--seed", "7", "--output-dir", str(a)] + FAST, capsys)[0] == 0
    assert run(["estimate", "--seed", "7", "--output-dir", str(b)] + FAST, capsys)[0] == 0
    for name in ("results.csv", "records.jsonl", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["config"]["experiment"]["seed"] == "7"
    lines = (a / "results.csv").read_text().splitlines()
    assert lines[0].startswith("run_id,scene_id,object_id/frame,class,")
    assert len(lines) == 2


def test_seed_changes_the_outcome(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    run(["render", "--seed", "1", "--output-dir", str(a)] + FAST, capsys)
    run(["render", "--seed", "2", "--output-dir", str(b)] + FAST, capsys)
    assert (a / "scene.json").read_text() != (b / "scene.json").read_text()


def test_missing_config_exits_1(tmp_path, capsys):
    path = str(tmp_path / "scene.cfg")
    rc, _, err = run(["estimate", "--config", path, "--output-dir", str(tmp_path / "o")], capsys)
    assert rc == 1
    assert path in err
    assert not (tmp_path / "o").exists()


def test_unknown_key_exits_1(tmp_path, capsys):
    path = tmp_path / "scene.cfg"
    path.write_text("[likelihood]\nradius = 3\n")
    rc, _, err = run(["estimate", "--config", str(path), "--output-dir", str(tmp_path / "o")], capsys)
    assert rc == 1 and "likelihood.radius" in err


def test_missing_mesh_exits_1(tmp_path, capsys):
    rc, _, err = run(["render", "--set", "meshes.bracket=/no/such.obj", "--output-dir", str(tmp_path)], capsys)
    assert rc == 1 and "/no/such.obj" in err


def test_runtime_failure_exits_2(tmp_path, capsys):
    argv = ["render", "--output-dir", str(tmp_path), "--set", "scene.depth_min=50", "--set", "scene.depth_max=60",
            "--set", "scene.max_tries=5"]
    rc, _, err = run(argv, capsys)
    assert rc == 2 and "could not place" in err


def test_selftest_passes(tmp_path, capsys):
    rc, out, _ = run(["selftest", "--output-dir", str(tmp_path)], capsys)
    assert rc == 0
    lines = out.strip().splitlines()
    assert len(lines) >= 4 and all(ln.startswith("PASS") for ln in lines)
    assert all(r["pass"] for r in json.loads((tmp_path / "selftest.json").read_text()))


def test_hypotheses_and_render_outputs(tmp_path, capsys):
    h, r = tmp_path / "h", tmp_path / "r"
    assert run(["hypotheses", "--output-dir", str(h)] + FAST, capsys)[0] == 0
    lines = [json.loads(ln) for ln in (h / "hypotheses.jsonl").read_text().splitlines()]
    assert len(lines) == hn.HypothesesConfig().n_hypotheses
    assert [ln["rank"] for ln in lines] == list(range(len(lines)))
    assert all(a["score"] >= b["score"] for a, b in zip(lines, lines[1:]))
    assert run(["render", "--output-dir", str(r)] + FAST, capsys)[0] == 0
    data = np.load(r / "render.npz")
    assert data["depth"].shape == (120, 160)
    assert data["observed_points"].shape == (120, 160, 3)
    assert len(json.loads((r / "scene.json").read_text())) == 1


def test_writes_stay_in_the_output_dir(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    out = tmp_path / "deep" / "out"
    for cmd in ("selftest", "render", "hypotheses"):
        assert run([cmd, "--output-dir", str(out)] + FAST, capsys)[0] == 0
    created = [p for p in tmp_path.rglob("*") if p.is_file()]
    assert created and all(out in p.parents for p in created)


def test_threads_fallback(monkeypatch):
    top = numba.config.NUMBA_NUM_THREADS
    monkeypatch.setenv("NEL_POSE_THREADS", "1")
    assert set_threads(None) == 1 and numba.get_num_threads() == 1
    monkeypatch.setenv("NEL_POSE_THREADS", "0")
    assert set_threads(None) == top
    assert set_threads(1) == 1
    monkeypatch.delenv("NEL_POSE_THREADS")
    assert set_threads(None) == top
    with pytest.raises(ConfigError):
        set_threads(-1)


def test_bad_thread_env_exits_1(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("NEL_POSE_THREADS", "-2")
    assert run(["selftest", "--output-dir", str(tmp_path)], capsys)[0] == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "nel_pose", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("estimate", "track", "camera-track", "hypotheses", "render", "selftest", "bench"):
        assert name in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "nel_pose", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode != 0
