import hashlib
import json
import os

import pytest

from mdap.cli import (OPTION_TABLE, PRESETS, build_parser, main,
                      parse_config_file, parse_grid, resolve_options)
from mdap.errors import ParameterError


def file_hash(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


def synth_args(out, **over):
    base = {"seed": 3, "n_users": 60, "n_items_s": 16, "n_items_t": 12,
            "k_true": 4, "overlap": 0.5, "noise": 0.05}
    base.update(over)
    argv = ["synth", "--out", out]
    for key, value in base.items():
        argv += ["--" + key.replace("_", "-"), value]
    return argv


def prepared_dir(tmp_path, seed=3):
    """Synth then prepare under tmp_path; returns the shared out dir."""
    syn = tmp_path / "syn"
    out = tmp_path / "out"
    assert run(*synth_args(syn)) == 0
    assert run("prepare", "--domain-s", syn / "domain_s.tsv",
               "--domain-t", syn / "domain_t.tsv", "--out", out,
               "--seed", seed) == 0
    return out


def test_synth_writes_expected_files(tmp_path):
    out = tmp_path / "syn"
    assert run(*synth_args(out)) == 0
    for name in ("domain_s.tsv", "domain_t.tsv", "planted_views.tsv",
                 "config_synth.json"):
        assert (out / name).exists(), name
    payload = json.loads((out / "config_synth.json").read_text())
    assert payload["command"] == "synth"
    assert payload["options"]["n_users"] == 60
    assert len(payload["config_hash"]) == 16


def test_synth_overlap_controls_shared_users(tmp_path):
    out = tmp_path / "syn"
    assert run(*synth_args(out, n_users=200, n_items_s=40, n_items_t=30)) == 0
    users_s = {line.split("\t")[0] for line in (out / "domain_s.tsv").read_text().splitlines()}
    users_t = {line.split("\t")[0] for line in (out / "domain_t.tsv").read_text().splitlines()}
    assert len(users_s & users_t) == 100  # overlap 0.5 of 200


def test_synth_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(*synth_args(a)) == 0
    assert run(*synth_args(b)) == 0
    for name in ("domain_s.tsv", "domain_t.tsv", "planted_views.tsv"):
        assert file_hash(a / name) == file_hash(b / name)


def test_prepare_manifest_matches_split_files(tmp_path):
    out = prepared_dir(tmp_path)
    manifest = json.loads((out / "manifest.json").read_text())
    for domain in ("s", "t"):
        for split in ("train", "valid", "test"):
            lines = (out / "splits" / f"{domain}_{split}.tsv").read_text().splitlines()
            assert len(lines) == manifest["splits"][domain][split]
    assert manifest["n_users"] == 60


def test_prepare_is_reproducible(tmp_path):
    out_a = prepared_dir(tmp_path / "a")
    out_b = prepared_dir(tmp_path / "b")
    for domain in ("s", "t"):
        for split in ("train", "valid", "test"):
            rel = os.path.join("splits", f"{domain}_{split}.tsv")
            assert file_hash(out_a / rel) == file_hash(out_b / rel)


def test_prepare_min_interactions_filters(tmp_path):
    syn = tmp_path / "syn"
    assert run(*synth_args(syn)) == 0
    out = tmp_path / "core"
    assert run("prepare", "--domain-s", syn / "domain_s.tsv",
               "--domain-t", syn / "domain_t.tsv", "--out", out,
               "--min-interactions", 3) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["k_core"] == 3


def test_train_writes_artifacts(tmp_path, capsys):
    out = prepared_dir(tmp_path)
    code = run("train", "--out", out, "--epochs", 2, "--patience", 2,
               "--k", 2, "--embed-dim", 8, "--hidden", 16, "--quiet")
    assert code == 0
    assert (out / "checkpoints" / "model.ckpt").exists()
    lines = (out / "logs" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    record = json.loads(lines[0])
    assert record["epoch"] == 1
    assert set(record) == {"epoch", "loss_total", "loss_rec_s", "loss_rec_t",
                           "loss_orth", "val_recall20_s", "val_recall20_t",
                           "val_ndcg20_s", "val_ndcg20_t"}
    metrics = json.loads((out / "reports" / "test_metrics.json").read_text())
    assert metrics["split"] == "test"
    assert metrics["checkpoint"] == os.path.join("checkpoints", "model.ckpt")
    config = json.loads((out / "config_train.json").read_text())
    assert config["options"]["epochs"] == 2
    assert "best epoch" in capsys.readouterr().out


def test_parser_defaults_resolve(tmp_path):
    args = build_parser().parse_args(["train", "--out", "x"])
    options = resolve_options(args)
    assert options["epochs"] == 1000
    assert options["patience"] == 20
    assert options["batch_users"] == 4096
    assert options["lr"] == 1e-3
    assert options["embed_dim"] == 64
    assert options["hidden"] == 256
    assert options["k"] == 8
    assert options["tau"] == 0.2
    assert options["dropout"] == 0.5
    assert options["cutoff"] == 20


def test_preset_overrides_defaults():
    args = build_parser().parse_args(["train", "--out", "x", "--preset", "douban"])
    options = resolve_options(args)
    assert options["dropout"] == 0.7
    assert options["tau"] == 0.1
    assert options["k"] == 16
    assert options["lambda"] == 0.1
    assert PRESETS["epinions"] == {"dropout": 0.5, "tau": 0.2, "k": 8, "lambda": 0.5}
    assert PRESETS["amazon"] == {"dropout": 0.7, "tau": 0.1, "k": 4, "lambda": 0.1}


def test_option_precedence_config_preset_flags(tmp_path):
    cfg = tmp_path / "opts.cfg"
    cfg.write_text("tau = 0.9\nk = 3  # inline comment\nlr = 0.01\n")
    parser = build_parser()

    args = parser.parse_args(["train", "--out", "x", "--config", str(cfg)])
    options = resolve_options(args)
    assert options["tau"] == 0.9 and options["k"] == 3 and options["lr"] == 0.01

    args = parser.parse_args(["train", "--out", "x", "--config", str(cfg),
                              "--preset", "amazon"])
    options = resolve_options(args)
    assert options["tau"] == 0.1 and options["k"] == 4  # preset beats the file
    assert options["lr"] == 0.01  # preset does not touch lr

    args = parser.parse_args(["train", "--out", "x", "--config", str(cfg),
                              "--preset", "amazon", "--tau", "0.33"])
    options = resolve_options(args)
    assert options["tau"] == 0.33  # explicit flag beats everything


def test_parse_config_file_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("nonsense = 4\n")
    with pytest.raises(ParameterError):
        parse_config_file(str(cfg))
    cfg.write_text("no equals sign\n")
    with pytest.raises(ParameterError):
        parse_config_file(str(cfg))


def test_parse_grid():
    assert parse_grid("0.1, 0.2,0.5", float) == [0.1, 0.2, 0.5]
    assert parse_grid("4,8", int) == [4, 8]
    with pytest.raises(ParameterError):
        parse_grid("a,b", float)
    with pytest.raises(ParameterError):
        parse_grid(",", float)


def test_ablate_reports_all_variants(tmp_path):
    out = prepared_dir(tmp_path)
    code = run("ablate", "--out", out, "--epochs", 1, "--patience", 1,
               "--k", 2, "--embed-dim", 8, "--hidden", 16, "--quiet")
    assert code == 0
    report = json.loads((out / "reports" / "ablation.json").read_text())
    assert [row["variant"] for row in report["rows"]] == \
        ["MDAP", "MDAP-GS", "MDAP-MV", "MDAP-DG"]
    table = (out / "reports" / "ablation.txt").read_text()
    assert "MDAP-MV" in table
    for row in report["rows"]:
        tag = row["variant"].lower().replace("-", "_")
        assert (out / "logs" / f"ablation_{tag}.jsonl").exists()
        assert (out / "checkpoints" / f"ablation_{tag}.ckpt").exists()


def test_grid_single_point_runs_once(tmp_path):
    out = prepared_dir(tmp_path)
    code = run("grid", "--out", out, "--epochs", 1, "--patience", 1,
               "--embed-dim", 8, "--hidden", 16, "--quiet",
               "--dropout-grid", "0.5", "--tau-grid", "0.2",
               "--k-grid", "8", "--lambda-grid", "0.5")
    assert code == 0
    summary = json.loads((out / "reports" / "grid.json").read_text())
    assert len(summary["runs"]) == 1
    assert summary["best"]["run_id"] == 0
    run_dirs = sorted(os.listdir(out / "grid"))
    assert len(run_dirs) == 1
    assert (out / "grid" / run_dirs[0] / "result.json").exists()


def test_grid_staged_dedupes_repeats(tmp_path):
    out = prepared_dir(tmp_path)
    code = run("grid", "--out", out, "--epochs", 1, "--patience", 1,
               "--embed-dim", 8, "--hidden", 16, "--quiet",
               "--dropout-grid", "0.3,0.5", "--tau-grid", "0.2,0.5",
               "--k-grid", "2,8", "--lambda-grid", "0.1,0.5")
    assert code == 0
    summary = json.loads((out / "reports" / "grid.json").read_text())
    # 4 stage-1 runs, at most 1 new k (8 is the stage-1 base), at most
    # 1 new lambda (0.5 is the base); repeats come from the cache
    assert 4 <= len(summary["runs"]) <= 6
    assert [s["name"] for s in summary["stages"]] == ["dropout_tau", "k", "lambda"]
    keys = {(r["dropout"], r["tau"], r["k"], r["lambda"]) for r in summary["runs"]}
    assert len(keys) == len(summary["runs"])  # no duplicate work
    best = summary["best"]
    assert best["val_ndcg_mean"] == max(r["val_ndcg_mean"] for r in summary["runs"])


def test_grid_full_cross_product(tmp_path):
    out = prepared_dir(tmp_path)
    code = run("grid", "--out", out, "--full-grid", "--epochs", 1,
               "--patience", 1, "--embed-dim", 8, "--hidden", 16, "--quiet",
               "--dropout-grid", "0.3,0.5", "--tau-grid", "0.2",
               "--k-grid", "2", "--lambda-grid", "0.1,0.5")
    assert code == 0
    summary = json.loads((out / "reports" / "grid.json").read_text())
    assert len(summary["runs"]) == 4
    assert summary["stages"][0]["name"] == "full"


def test_exit_code_two_on_bad_inputs(tmp_path):
    assert run("train", "--out", tmp_path / "nowhere") == 2
    out = prepared_dir(tmp_path)
    assert run("train", "--out", out, "--tau", 0) == 2
    assert run("train", "--out", out, "--dropout", 1.0) == 2
    missing = tmp_path / "missing.tsv"
    assert run("prepare", "--domain-s", missing, "--domain-t", missing,
               "--out", tmp_path / "p") == 2


def test_exit_code_three_on_divergence(tmp_path):
    out = prepared_dir(tmp_path)
    assert run("train", "--out", out, "--epochs", 2, "--patience", 2,
               "--lr", 1e308, "--quiet") == 3


def test_failed_train_leaves_no_partial_artifacts(tmp_path):
    out = prepared_dir(tmp_path)
    assert run("train", "--out", out, "--tau", 0) == 2
    assert not (out / "checkpoints").exists()
    assert not (out / "logs").exists()


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        run("--version")
    assert exc.value.code == 0
    assert "mdap" in capsys.readouterr().out


def test_option_table_covers_all_preset_keys():
    for preset in PRESETS.values():
        assert set(preset) <= set(OPTION_TABLE)
