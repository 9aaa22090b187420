import json
import os

import jsonschema
import numpy as np
import pytest

from denoiserlab import cli

TINY_NET = ["--base-channels", "4", "--encoder-blocks", "1", "--layers-encoder", "1",
            "--layers-middle", "1", "--layers-decoder", "1"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def files(path):
    return {p.relative_to(path).as_posix(): p.read_bytes()
            for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", root / "data", "--n", 24, "--size", 8, "--seed", 7) == 0
    assert run("train", "--data", root / "data", "--out", root / "run", "--epochs", 2,
               "--batch-size", 8, *TINY_NET) == 0
    return root


def test_gen_data_reproducible_and_manifest(tmp_path):
    for d in ("a", "b"):
        assert run("gen-data", "--classes", "gratings,checker", "--n", 12, "--size", 8,
                   "--seed", 7, "--out", tmp_path / d) == 0
    fa, fb = files(tmp_path / "a"), files(tmp_path / "b")
    assert fa == fb
    assert sum(k.endswith(".pgm") for k in fa) == 12
    run_json = json.loads(fa["run.json"])
    assert run_json["command"] == "gen-data" and run_json["args"]["seed"] == 7


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run("gen-data", "--classes", "plaid", "--out", tmp_path / "x") == 2
    assert run("train", "--data", tmp_path / "missing", "--out", tmp_path / "r") == 2
    assert run("analyze", "entropy", "--checkpoint", "c", "--data", "d", "--out", tmp_path / "y") == 2
    assert run() == 2
    assert "error" in capsys.readouterr().err


def test_runtime_failure_exit_1(tmp_path, workspace):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert run("sample", "--checkpoint", bad, "--out", tmp_path / "s") == 1


def test_locked_run_dir_rejected(tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text("")
    assert run("gen-data", "--n", 4, "--size", 8, "--out", out) == 1


def test_train_reproducible_and_resume(tmp_path, workspace):
    assert run("train", "--data", workspace / "data", "--out", tmp_path / "r2", "--epochs", 2,
               "--batch-size", 8, *TINY_NET) == 0
    assert (tmp_path / "r2" / "model.ckpt").read_bytes() == (workspace / "run" / "model.ckpt").read_bytes()
    assert (tmp_path / "r2" / "loss.csv").read_bytes() == (workspace / "run" / "loss.csv").read_bytes()
    assert run("train", "--data", workspace / "data", "--out", tmp_path / "r2", "--epochs", 2,
               "--resume", "--batch-size", 8, *TINY_NET) == 0
    epochs = [int(line.split(",")[0]) for line in (tmp_path / "r2" / "loss.csv").read_text().splitlines()[1:]]
    assert epochs == [0, 1, 2, 3]
    assert run("train", "--data", workspace / "data", "--out", tmp_path / "fresh", "--epochs", 1,
               "--resume") == 2


@pytest.mark.parametrize("kind,outputs", [
    ("sparsity", ["sparsity.csv", "summary.json"]),
    ("selectivity", ["selectivity.csv", "summary.json"]),
    ("stability", ["stability.csv", "summary.json"]),
    ("stats", ["channel_stats.csv", "summary.json"]),
])
def test_analyze_outputs_reproducible(tmp_path, workspace, kind, outputs):
    args = ["analyze", kind, "--checkpoint", workspace / "run", "--data", workspace / "data",
            "--n-draws", 2, "--sigma-ref", 0.5]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    fa = files(tmp_path / "a")
    assert set(outputs) <= set(fa) and fa == files(tmp_path / "b")
    assert fa[outputs[0]].decode().splitlines()[0].count(",") >= 2


def test_stability_has_curve_per_probe(tmp_path, workspace):
    assert run("analyze", "stability", "--checkpoint", workspace / "run", "--data", workspace / "data",
               "--n-draws", 2, "--sigma-ref", 0.5, "--out", tmp_path / "s") == 0
    probes = {row.split(",")[0] for row in (tmp_path / "s" / "stability.csv").read_text().splitlines()[1:]}
    assert {"E1.output", "M.output", "M.input"} <= probes


def test_cluster_and_neighbors(tmp_path, workspace):
    assert run("cluster", "--k", 4, "--checkpoint", workspace / "run", "--data", workspace / "data",
               "--n-draws", 2, "--out", tmp_path / "c") == 0
    summary = json.loads((tmp_path / "c" / "summary.json").read_text())
    assert -1 <= summary["ari"] <= 1
    assert len((tmp_path / "c" / "assignments.csv").read_text().splitlines()) == 25
    assert run("neighbors", "--target", 17, "--metric", "pixel", "--k", 8, "--checkpoint",
               workspace / "run", "--data", workspace / "data", "--n-draws", 2, "--out", tmp_path / "n") == 0
    rows = (tmp_path / "n" / "neighbors.csv").read_text().splitlines()
    assert rows[0] == "rank,phi_id,phi_score,pixel_id,pixel_score" and len(rows) == 9
    assert rows[1].split(",")[1] == "17" and rows[1].split(",")[3] == "17"
    assert run("cluster", "--k", 99, "--checkpoint", workspace / "run", "--data", workspace / "data",
               "--out", tmp_path / "c2") == 2


def test_sample_and_unguided_reconstruct_bit_identical(tmp_path, workspace):
    assert run("sample", "--checkpoint", workspace / "run", "--n", 3, "--T", 6, "--seed", 4,
               "--out", tmp_path / "s") == 0
    assert run("reconstruct", "--checkpoint", workspace / "run", "--data", workspace / "data",
               "--conditioner", "img_003", "--n", 3, "--T", 6, "--seed", 4, "--no-guidance",
               "--n-draws", 2, "--out", tmp_path / "r") == 0
    s, r = files(tmp_path / "s"), files(tmp_path / "r")
    assert s["samples.npy"] == r["samples.npy"]
    assert s["sample_000.pgm"] == r["sample_000.pgm"] and "sample_002.pgm" in s
    assert len(s["trajectory.csv"].decode().splitlines()) == 6


def test_guided_reconstruct_writes_phi_match(tmp_path, workspace):
    assert run("reconstruct", "--checkpoint", workspace / "run", "--data", workspace / "data",
               "--conditioner", 5, "--n", 2, "--T", 4, "--max-iter", 3, "--n-draws", 2,
               "--out", tmp_path / "g") == 0
    rows = (tmp_path / "g" / "phi_match.csv").read_text().splitlines()
    assert rows[0] == "sample,relative_phi_error" and len(rows) == 3
    assert run("reconstruct", "--checkpoint", workspace / "run", "--data", workspace / "data",
               "--conditioner", "img_999", "--out", tmp_path / "h") == 2


def test_embed_check_schema_and_min_pairs(tmp_path, workspace):
    base = ["embed-check", "--checkpoint", workspace / "run", "--data", workspace / "data",
            "--n-sigma", 3, "--T", 3, "--max-iter", 2, "--n-draws", 2]
    assert run(*base, "--pairs", 1, "--out", tmp_path / "e1") == 2
    assert run(*base, "--pairs", 10, "--out", tmp_path / "e") == 0
    summary = json.loads((tmp_path / "e" / "summary.json").read_text())
    jsonschema.validate(summary, cli.EMBED_SUMMARY_SCHEMA)
    assert summary["n_pairs"] == 10
    assert len((tmp_path / "e" / "embedding.csv").read_text().splitlines()) == 11
    assert not os.path.exists(tmp_path / "e" / ".lock")
