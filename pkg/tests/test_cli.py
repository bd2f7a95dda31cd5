import json

import pytest

from mv3d.cli import apply_overrides, main
from mv3d.config import ConfigError, RunConfig

TINY = {
    "scene": {"n_sweeps": 25},
    "model": {"embed_dim": 8, "n_heads": 2, "n_layers": 1, "n_det": 4, "depth_num": 4, "enc_channels": [4, 4, 4],
              "map_size": 64, "patch_h": 32, "patch_w": 32, "num_freqs": 2},
    "train": {"steps": 3, "batch_size": 2},
    "data": {"n_train": 2, "n_eval": 1},
    "sweep": {"r_max": [0.0, 4.0], "delays": [0, 2]},
}


def write_cfg(tmp_path, name="cfg.json", **extra):
    d = json.loads(json.dumps(TINY))
    d["data"]["root"] = str(tmp_path / "data")
    d["out_dir"] = str(tmp_path / "run")
    d.update(extra)
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / name
    path.write_text(json.dumps(d))
    return path


def test_config_round_trip():
    cfg = RunConfig.from_dict(TINY)
    assert RunConfig.loads(cfg.dumps()) == cfg
    assert cfg.model.enc_channels == (4, 4, 4)


def test_config_errors():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"scene": {"n_sweeps": 25}, "modle": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"stepz": 3}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"scene": {"roi": [-30, 30, -30, 30, -5, 5]},
                             "model": {"roi": [-61.2, 61.2, -61.2, 61.2, -10, 10]}})
    with pytest.raises(ConfigError):
        RunConfig.loads("{not json")
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"sweep": {"kinds": ["fog"]}})


def test_scene_roi_propagates_to_model():
    cfg = RunConfig.from_dict({"scene": {"roi": [-30, 30, -30, 30, -5, 5]}})
    assert tuple(cfg.model.roi) == (-30, 30, -30, 30, -5, 5)


def test_overrides():
    d = apply_overrides({}, ["train.steps=7", "model.use_ca=false", "out_dir=x", "data.root=some/where"])
    assert d == {"train": {"steps": 7}, "model": {"use_ca": False}, "out_dir": "x", "data": {"root": "some/where"}}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["steps=3"])


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["train", "--config", str(bad)]) == 2
    bad.write_text("{oops")
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["eval", "--config", str(write_cfg(tmp_path))]) == 2  # no dataset yet
    assert "gen-data" in capsys.readouterr().err


def _pipeline(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["gen-data", "-c", str(cfg)]) == 0
    assert main(["train", "-c", str(cfg), "--quiet"]) == 0
    assert main(["eval", "-c", str(cfg)]) == 0
    assert main(["sweep", "-c", str(cfg)]) == 0
    assert main(["sweep", "-c", str(cfg), "--oracle", "--name", "oracle", "--kind", "time_delay"]) == 0
    capsys.readouterr()
    run = tmp_path / "run"
    assert main(["plot", str(run / "sweep.csv")]) == 0
    assert main(["plot", str(run / "train_log.csv"), "--out", str(run / "log.svg")]) == 0
    names = ["train_log.csv", "metrics.csv", "sweep.csv", "oracle.csv", "checkpoint.bin", "predictions.jsonl",
             "sweep.svg", "log.svg"]
    out = {n: (run / n).read_bytes() for n in names}
    out["scenes.csv"] = (tmp_path / "data" / "scenes.csv").read_bytes()
    return out


def test_pipeline_is_byte_reproducible(tmp_path, capsys):
    a = _pipeline(tmp_path / "a", capsys)
    b = _pipeline(tmp_path / "b", capsys)
    for name in a:
        assert a[name] == b[name], name
    header = a["sweep.csv"].decode().splitlines()[0].split(",")
    assert header[:5] == ["kind", "r_max", "cam_id", "delay", "seed"] and "mAP" in header
    kinds = [line.split(",")[0] for line in a["sweep.csv"].decode().splitlines()[1:]]
    assert kinds == ["extrinsics_rotation"] * 2 + ["time_delay"] * 2 + ["camera_miss"] * 2
    assert a["train_log.csv"].decode().count("\n") == 4


def test_plot_rejects_unknown_csv(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    assert main(["plot", str(p)]) == 2


def test_packaged_preset_loads(tmp_path):
    from mv3d.config import preset_names, preset_text
    assert "benchmark" in preset_names()
    cfg = RunConfig.loads(preset_text("benchmark"))
    assert (cfg.model.embed_dim, cfg.model.n_layers, cfg.scene.n_cams) == (64, 3, 2)
    assert (cfg.data.n_train, cfg.data.n_eval) == (200, 50)
    with pytest.raises(ConfigError):
        preset_text("no-such-preset")
    assert main(["gen-data", "-c", "no-such-preset"]) == 2
