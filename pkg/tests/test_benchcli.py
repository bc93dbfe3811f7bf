import json
import logging
import os

import numpy as np
import pytest

from cfmpolicy import benchcli as bc
from cfmpolicy import policy as pol
from cfmpolicy.numcore import NumericError, Rng
from cfmpolicy.simenv import env_reset, observe

from conftest import tiny_config_dict


def test_config_round_trip(tiny_cfg):
    text = tiny_cfg.to_json()
    again = bc.RunConfig.from_json(text)
    assert again.to_json() == text
    assert again.hash() == tiny_cfg.hash()
    assert bc.RunConfig().to_dict() == bc.RunConfig.from_dict(bc.RunConfig().to_dict()).to_dict()


@pytest.mark.parametrize("path", [(), ("task",), ("policy",), ("policy", "schedule")])
def test_unknown_keys_rejected(tmp_path, path):
    d = tiny_config_dict(tmp_path)
    d["policy"]["schedule"] = {"K": 2}
    node = d
    for key in path:
        node = node[key]
    node["surprise"] = 1
    with pytest.raises(bc.ConfigError, match="surprise"):
        bc.RunConfig.from_dict(d)


@pytest.mark.parametrize("patch", [{"seeds": [1, 1]}, {"seeds": []}, {"sampler": "heun"},
                                   {"policy": {"n_demos": 0}}, {"task": {"variant": "push"}},
                                   {"policy": {"schedule": {"K": 0}}}])
def test_invalid_values_rejected(patch):
    with pytest.raises(bc.ConfigError):
        bc.RunConfig.from_dict(patch)


def test_hash_tracks_content(tiny_cfg):
    other = bc.RunConfig.from_dict({**tiny_cfg.to_dict(), "eval_seed": 99})
    assert other.hash() != tiny_cfg.hash()
    assert other.data_hash() == tiny_cfg.data_hash()


def test_aggregate():
    assert bc.aggregate([]) == (None, None)
    assert bc.aggregate([40.0]) == (40.0, None)
    mean, std = bc.aggregate([80.0, 90.0, 100.0])
    assert mean == 90.0 and abs(std - np.sqrt(200 / 3)) <= 1e-12


def test_strip_wall_time():
    rec = {"nfe": 1, "time_ms_mean": 0.3, "time_ms_std": 0.1, "speedup_x": 4.0, "success_mean": 80}
    assert bc.strip_wall_time(rec) == {"nfe": 1, "success_mean": 80}


def test_dataset_round_trip(tiny_cfg, tmp_path):
    demos = bc.generate_demos(tiny_cfg)
    path = str(tmp_path / "d.cfmd")
    bc.save_dataset(path, demos, tiny_cfg.task, tiny_cfg.data_hash())
    back, header = bc.load_dataset(path, tiny_cfg.data_hash())
    assert header["n_demos"] == "2" and header["task.variant"] == "reach"
    for a, b in zip(demos, back):
        assert np.array_equal(a.actions.astype(np.float32), b.actions)
        assert np.array_equal(a.clouds.astype(np.float32), b.clouds)
        assert np.array_equal(a.targets, b.targets) and a.goal == b.goal
    with open(path, "rb") as fh:
        raw = fh.read()
    # generation is deterministic: a second pass writes identical bytes
    bc.save_dataset(path, bc.generate_demos(tiny_cfg), tiny_cfg.task, tiny_cfg.data_hash())
    with open(path, "rb") as fh:
        assert fh.read() == raw


def test_dataset_header_checks(tiny_cfg, tmp_path, caplog):
    path = str(tmp_path / "d.cfmd")
    bc.save_dataset(path, bc.generate_demos(tiny_cfg), tiny_cfg.task, tiny_cfg.data_hash())
    with caplog.at_level(logging.WARNING, logger="cfmpolicy"):
        bc.load_dataset(path, "0" * 16)
    assert "config" in caplog.text
    raw = bytearray(open(path, "rb").read())
    raw[8:12] = (2).to_bytes(4, "little")
    bad = tmp_path / "v2.cfmd"
    bad.write_bytes(bytes(raw))
    with pytest.raises(bc.FormatError, match="version"):
        bc.load_dataset(str(bad))
    junk = tmp_path / "junk.cfmd"
    junk.write_bytes(b"not a dataset at all")
    with pytest.raises(bc.FormatError):
        bc.load_dataset(str(junk))
    cut = tmp_path / "cut.cfmd"
    cut.write_bytes(open(path, "rb").read()[:-5])
    with pytest.raises(bc.FormatError):
        bc.load_dataset(str(cut))


def test_checkpoint_round_trip(tiny_cfg, tmp_path):
    demos = bc.generate_demos(tiny_cfg)
    trained = pol.train_policy(demos, tiny_cfg.policy, seed=0, epochs=2)
    path = str(tmp_path / "p.ckpt")
    bc.save_checkpoint(path, trained, tiny_cfg)
    back, cfg = bc.load_checkpoint(path, tiny_cfg.hash())
    assert cfg.to_dict() == tiny_cfg.to_dict() and back.epoch == 2
    assert back.losses == trained.losses
    for a, b in zip(trained.model.params() + trained.ema.model.params(),
                    back.model.params() + back.ema.model.params()):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(trained.opt_state.m + trained.opt_state.v, back.opt_state.m + back.opt_state.v):
        assert a.tobytes() == b.tobytes()
    obs = observe(tiny_cfg.task, env_reset(tiny_cfg.task, Rng(0)))
    x, _ = pol.act(trained, [obs, obs], Rng(1))
    y, _ = pol.act(back, [obs, obs], Rng(1))
    assert np.array_equal(x, y)
    assert not os.path.exists(path + ".tmp")


def test_cli_pipeline_and_resume(tiny_cfg_file, tmp_path, capsys):
    run = tmp_path / "run"
    data = str(run / "demos.cfmd")
    assert bc.main(["demo-gen", "--config", str(tiny_cfg_file), "--out", data]) == 0
    full = str(tmp_path / "full.ckpt")
    part = str(tmp_path / "part.ckpt")
    args = ["train", "--config", str(tiny_cfg_file), "--dataset", data]
    assert bc.main(args + ["--out", full, "--epochs", "4"]) == 0
    assert bc.main(args + ["--out", part, "--epochs", "2"]) == 0
    assert bc.main(args + ["--out", part, "--resume", part, "--epochs", "4"]) == 0
    a, _ = bc.load_checkpoint(full)
    b, _ = bc.load_checkpoint(part)
    assert a.losses == b.losses and a.report.checkpoints == b.report.checkpoints
    for x, y in zip(a.model.params(), b.model.params()):
        assert np.array_equal(x, y)
    log_lines = [json.loads(s) for s in open(str(tmp_path / "full.log.jsonl"))]
    assert log_lines[0]["epoch"] == 1 and len(log_lines) == 4 + 2

    for sampler, nfe in (("onestep", 1), ("euler-10", 10)):
        assert bc.main(["eval", "--config", str(tiny_cfg_file), "--checkpoint", full,
                        "--sampler", sampler, "--out", str(tmp_path / sampler)]) == 0
        row = json.loads(open(str(tmp_path / sampler / "eval.jsonl")).readline())
        assert row["nfe"] == nfe and row["n_seeds"] == 2


def test_exit_codes(tmp_path, tiny_cfg_file):
    bad = tmp_path / "bad.json"
    bad.write_text('{"policy": {"lr": 1e-3, "bogus": 1}}')
    assert bc.main(["demo-gen", "--config", str(bad)]) == bc.EXIT_VALIDATION
    bad.write_text("{not json")
    assert bc.main(["demo-gen", "--config", str(bad)]) == bc.EXIT_VALIDATION
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"\x00" * 64)
    assert bc.main(["eval", "--config", str(tiny_cfg_file), "--checkpoint", str(junk)]) == bc.EXIT_RUNTIME
    with pytest.raises(SystemExit):
        bc.main(["launch"])


def test_expert_retry_budget(tiny_cfg):
    cfg = bc.RunConfig.from_dict({**tiny_cfg.to_dict(), "task": {"max_steps": 1},
                                  "max_expert_retries": 3})
    with pytest.raises(RuntimeError, match="retry budget"):
        bc.generate_demos(cfg)


def test_nan_keeps_last_good_checkpoint(tiny_cfg, tmp_path, monkeypatch):
    data = str(tmp_path / "d.cfmd")
    bc.save_dataset(data, bc.generate_demos(tiny_cfg), tiny_cfg.task, tiny_cfg.data_hash())
    real = pol.policy_loss
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        loss, grads = real(*a, **kw)
        # windows fit in one batch, so call k is epoch k
        return (float("nan") if calls["n"] == 3 else loss), grads

    monkeypatch.setattr(pol, "policy_loss", flaky)
    path = str(tmp_path / "p.ckpt")
    with pytest.raises(NumericError):
        bc.cmd_train(tiny_cfg, data, out=path)
    kept, _ = bc.load_checkpoint(path)
    assert kept.epoch == 2 and all(np.all(np.isfinite(p)) for p in kept.model.params())


def test_bench_rows(tiny_cfg, tmp_path):
    rows = bc.cmd_bench(tiny_cfg, str(tmp_path / "b"))
    assert [r.method for r in rows] == ["flowpolicy-onestep", "flowpolicy-segments", "cfm-euler10"]
    assert [r.nfe for r in rows] == [1, 2, 10]
    assert all(r.n_seeds == 2 and r.success_std is not None for r in rows)
    recs = [json.loads(s) for s in open(str(tmp_path / "b" / "results.jsonl"))]
    assert recs[-1]["record"] == "per_seed"
    header = open(str(tmp_path / "b" / "results.csv")).readline().strip().split(",")
    assert header[:4] == ["task", "method", "sampler", "nfe"]
    summary = json.load(open(str(tmp_path / "b" / "summary.json")))
    assert summary["speedup_euler10_over_onestep"] > 0
