import json
import os
import re
from pathlib import Path

import numpy as np
import pytest

from sparsemarl import cli
from sparsemarl import sparse_topology as topo
from sparsemarl.networks import load_checkpoint

FAST = ["--set", "total_steps=600", "--set", "warmup_steps=100",
        "--set", "epsilon_anneal_steps=300", "--set", "eval_interval_steps=200",
        "--set", "eval_episodes=2", "--set", "batch_offline=4",
        "--set", "batch_online=2", "--set", "buffer_capacity_online=16",
        "--set", "target_update_episodes=20",
        "--set", "evolve_interval_episodes=20"]


def train(tmp_path, *extra) -> Path:
    rc = cli.main(["train", "--preset", "climb", "--out", str(tmp_path),
                   *FAST, *extra])
    assert rc == 0
    runs = sorted(p for p in tmp_path.iterdir() if p.is_dir())
    return runs[-1]


def test_train_writes_all_outputs(tmp_path):
    run_dir = train(tmp_path, "--sparsity", "0.8", "--seed", "3")
    for name in ("config.yaml", "manifest.json", "metrics.csv", "evolution.csv",
                 "checkpoint.npz", "flops.csv", "flops.txt"):
        assert (run_dir / name).exists(), name
    assert (run_dir / "maskstats" / "maskstats.csv").exists()
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["config"]["sparsity"] == 0.8
    assert manifest["config"]["seed"] == 3
    assert manifest["overrides"]["sparsity"] == 0.8
    assert manifest["config_hash"]
    assert manifest["code_version"]


def test_missing_config_file_exits_2(tmp_path, caplog):
    rc = cli.main(["train", "--config", "/no/such/file.yaml",
                   "--out", str(tmp_path)])
    assert rc == 2
    assert any("/no/such/file.yaml" in r.message for r in caplog.records)


def test_unknown_key_exits_2(tmp_path):
    rc = cli.main(["train", "--preset", "climb", "--out", str(tmp_path),
                   "--set", "bogus_key=1"])
    assert rc == 2


def test_reproducible_metrics_csv(tmp_path):
    r1 = train(tmp_path / "a", "--seed", "7", "--sparsity", "0.5")
    r2 = train(tmp_path / "b", "--seed", "7", "--sparsity", "0.5")
    assert (r1 / "metrics.csv").read_bytes() == (r2 / "metrics.csv").read_bytes()
    assert (r1 / "evolution.csv").read_bytes() == (r2 / "evolution.csv").read_bytes()


def test_manifest_relaunch_identical(tmp_path):
    run_dir = train(tmp_path / "a", "--seed", "5", "--sparsity", "0.6")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg_file = tmp_path / "relaunch.yaml"
    from sparsemarl.config import yaml_value
    cfg_file.write_text("\n".join(
        f"{k}: {yaml_value(v)}" for k, v in manifest["config"].items()))
    rc = cli.main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "b")])
    assert rc == 0
    second = sorted(p for p in (tmp_path / "b").iterdir() if p.is_dir())[-1]
    assert (run_dir / "metrics.csv").read_bytes() == (second / "metrics.csv").read_bytes()


def test_eval_checkpoint(tmp_path, capsys):
    run_dir = train(tmp_path)
    rc = cli.main(["eval", "--checkpoint", str(run_dir / "checkpoint.npz"),
                   "--episodes", "4", "--seed", "0"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "mean return" in out and "solve rate" in out


def test_eval_zero_episodes_usage_error(tmp_path):
    run_dir = train(tmp_path)
    rc = cli.main(["eval", "--checkpoint", str(run_dir / "checkpoint.npz"),
                   "--episodes", "0"])
    assert rc == 2


def test_eval_deterministic(tmp_path, capsys):
    run_dir = train(tmp_path)
    capsys.readouterr()  # drop the training command's own output
    outs = []
    for _ in range(2):
        rc = cli.main(["eval", "--checkpoint", str(run_dir / "checkpoint.npz"),
                       "--episodes", "3", "--seed", "11"])
        assert rc == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]


def test_eval_missing_checkpoint(tmp_path):
    rc = cli.main(["eval", "--checkpoint", str(tmp_path / "nope.npz")])
    assert rc == 2


def test_flops_dense_ratios(tmp_path, capsys):
    rc = cli.main(["flops", "--preset", "climb"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "(ratio 1.0000)" in out


def test_flops_sparse_ratio_csv(tmp_path, capsys):
    csv_path = tmp_path / "flops.csv"
    rc = cli.main(["flops", "--preset", "climb", "--sparsity", "0.9",
                   "--csv", str(csv_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "(ratio 0.1000)" in out
    text = csv_path.read_text()
    assert "train_flops[res_table]" in text
    assert "train_flops[res_derivation]" in text


def test_flops_wqmix_uses_four_network_formula(capsys):
    rc = cli.main(["flops", "--preset", "climb", "--algo", "owqmix"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "u_mixer" in out


def test_maskstats_round_trip(tmp_path):
    run_dir = train(tmp_path, "--sparsity", "0.7")
    out_dir = tmp_path / "stats"
    rc = cli.main(["maskstats", "--checkpoint", str(run_dir / "checkpoint.npz"),
                   "--out", str(out_dir)])
    assert rc == 0
    csv_lines = (out_dir / "maskstats.csv").read_text().strip().split("\n")
    assert csv_lines[0] == topo.MASK_STATS_HEADER
    # recompute the total ones from the checkpoint and compare with the CSV
    arrays, meta = load_checkpoint(run_dir / "checkpoint.npz")
    mask_total = int(sum(arrays[k].sum() for k in arrays if "/m" in k))
    input_rows = [l for l in csv_lines[1:] if ",input," in l]
    csv_total = sum(int(l.rsplit(",", 1)[1]) for l in input_rows)
    assert csv_total == mask_total
    bitmaps = list(out_dir.glob("*.bitmap.txt"))
    assert bitmaps
    bit_total = sum(b.read_text().count("1") for b in bitmaps)
    assert bit_total == mask_total


def test_specdump(tmp_path):
    out = tmp_path / "climb.json"
    rc = cli.main(["specdump", "--preset", "climb", "--out", str(out)])
    assert rc == 0
    dump = json.loads(out.read_text())
    assert dump["rewards"][0][0] == 11.0


def test_env_var_out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("SPARSEMARL_OUT", str(tmp_path / "envroot"))
    rc = cli.main(["train", "--preset", "climb", *FAST])
    assert rc == 0
    assert any((tmp_path / "envroot").iterdir())


def test_list_presets_and_help_keys(capsys):
    assert cli.main(["--list-presets"]) == 0
    out = capsys.readouterr().out
    assert "climb" in out and "coopgrid" in out
    assert cli.main(["--help-keys"]) == 0
    out = capsys.readouterr().out
    assert "sparsity" in out


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    run_dir = train(tmp_path)
    arrays, meta = load_checkpoint(run_dir / "checkpoint.npz")
    meta["config"]["env"] = "coopgrid"  # different obs/state dims
    from sparsemarl.networks import save_checkpoint
    bad = tmp_path / "bad.npz"
    np_arrays = {k: v for k, v in arrays.items()}
    import numpy as np
    payload = dict(np_arrays)
    payload["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(bad, **payload)
    rc = cli.main(["eval", "--checkpoint", str(bad), "--episodes", "1"])
    assert rc == 2
