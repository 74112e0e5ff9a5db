"""End-to-end command-line flows on a deliberately tiny model."""

import json

import pytest

from tinyspec.checkpoint import load_checkpoint
from tinyspec.cli import main

CONFIG = """\
[model]
n_layers = 1
n_heads = 2
d_model = 16
d_ff = 32
max_positions = 64
init_seed = 3

[data]
task = "copy"
n = 48
len_lo = 3
len_hi = 5
seed = 11

[noise]
segment_len = 2
seed = 4

[train]
epochs = 2
batch_size = 8
lr = 2e-3
seed = 9
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "train.toml"
    cfg.write_text(CONFIG)
    ckpt = d / "model.ckpt"
    rc = main(["train", "--config", str(cfg), "--out", str(ckpt)])
    assert rc == 0
    return d


def test_train_writes_checkpoint_and_summary(workdir, capsys):
    cfg = workdir / "train.toml"
    out = workdir / "again.ckpt"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["checkpoint"] == str(out)
    assert summary["steps"] == 12  # 48 samples / batch 8 * 2 epochs
    assert summary["final_loss"] > 0
    weights, meta = load_checkpoint(out)
    assert weights.cfg.d_model == 16
    assert meta["noise"]["segment_len"] == 2
    assert meta["train"]["epochs"] == 2
    # training is fully reproducible: same config gives identical bytes
    assert out.read_bytes() == (workdir / "model.ckpt").read_bytes()


def test_train_cli_overrides_reach_the_checkpoint(workdir, capsys):
    cfg = workdir / "train.toml"
    out = workdir / "sft.ckpt"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--noise-len", "0", "--seed", "5"]) == 0
    capsys.readouterr()
    _, meta = load_checkpoint(out)
    assert meta["noise"]["segment_len"] == 0
    assert meta["noise"]["seed"] == 5
    assert meta["train"]["seed"] == 5


def test_generate_streams_text_and_metrics(workdir, capsys):
    ckpt = workdir / "model.ckpt"
    for strategy in ("ar", "jacobi", "tr-jacobi"):
        rc = main([
            "generate", "--ckpt", str(ckpt), "--prompt", "COPY:abc→",
            "--strategy", strategy, "--max-new", "12",
        ])
        assert rc == 0
        out, err = capsys.readouterr()
        assert out.endswith("\n")
        metrics = json.loads(err.strip().splitlines()[-1])
        assert metrics["decode_forwards"] >= 1
        assert metrics["mat"] >= 1.0
        if strategy == "ar":
            ar_text = out
        else:
            assert out == ar_text  # lossless strategies print the same continuation


def test_eval_exact_and_denoise(workdir, capsys):
    ckpt = workdir / "model.ckpt"
    assert main(["eval", "--ckpt", str(ckpt), "--task", "copy", "--n", "10", "--max-new", "16"]) == 0
    rec = json.loads(capsys.readouterr().out.strip())
    assert rec["metric"] == "exact" and rec["n"] == 10
    assert 0.0 <= rec["value"] <= 1.0
    assert main([
        "eval", "--ckpt", str(ckpt), "--task", "copy", "--metric", "denoise", "--n", "10",
    ]) == 0
    rec = json.loads(capsys.readouterr().out.strip())
    assert rec["metric"] == "denoise"
    assert 0.0 <= rec["value"] <= 1.0


def test_eval_suite_defaults_to_training_length_range(workdir, capsys, monkeypatch):
    """Held-out suites reuse the checkpoint's own len range unless overridden."""
    import tinyspec.cli as cli_mod

    seen = {}
    real = cli_mod.gen_synthetic

    def spy(task, n, len_range=(8, 14), seed=0):
        seen["len_range"] = len_range
        return real(task, n, len_range=len_range, seed=seed)

    monkeypatch.setattr(cli_mod, "gen_synthetic", spy)
    ckpt = workdir / "model.ckpt"
    assert main(["eval", "--ckpt", str(ckpt), "--task", "copy", "--n", "4"]) == 0
    assert seen["len_range"] == (3, 5)  # from the training config, not the generator default
    assert main([
        "eval", "--ckpt", str(ckpt), "--task", "copy", "--n", "4", "--len-lo", "4", "--len-hi", "6",
    ]) == 0
    assert seen["len_range"] == (4, 6)
    capsys.readouterr()
    with pytest.raises(ValueError, match="together"):
        cli_mod.cmd_eval(
            cli_mod.build_parser().parse_args(
                ["eval", "--ckpt", str(ckpt), "--task", "copy", "--len-lo", "4"]
            )
        )


def test_bench_prints_table_and_jsonl_report(workdir, capsys):
    ckpt = workdir / "model.ckpt"
    report = workdir / "bench.jsonl"
    rc = main([
        "bench", "--ckpt", str(ckpt), "--task", "copy", "--n", "4",
        "--strategies", "ar,jacobi", "--max-new", "10", "--report", str(report),
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "strategy" in out and "mat" in out and "jacobi" in out
    rows = [json.loads(line) for line in report.read_text().splitlines()]
    assert [r["strategy"] for r in rows] == ["ar", "jacobi"]
    ar, jacobi = rows
    assert ar["mat"] == 1.0
    assert ar["speedup_vs_ar"] == 1.0
    assert jacobi["mat"] >= 1.0
    assert jacobi["committed_tokens"] == ar["committed_tokens"]  # lossless: same tokens out
    assert {"task", "n_prompts", "decode_forwards", "tokens_per_second", "reps"} <= set(ar)


def test_sweep_infer_block_len(workdir, capsys):
    ckpt = workdir / "model.ckpt"
    report = workdir / "sweep.jsonl"
    rc = main([
        "sweep", "--axis", "infer_block_len", "--values", "1,2", "--ckpt", str(ckpt),
        "--task", "copy", "--n", "3", "--max-new", "10", "--report", str(report),
    ])
    assert rc == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.strip().splitlines()]
    assert [r["value"] for r in rows] == [1, 2]
    assert all(r["axis"] == "infer_block_len" for r in rows)
    assert report.exists()


def test_sweep_retrieval_toggle(workdir, capsys):
    ckpt = workdir / "model.ckpt"
    rc = main([
        "sweep", "--axis", "retrieval_on_off", "--values", "on,off", "--ckpt", str(ckpt),
        "--task", "copy", "--n", "3", "--max-new", "10",
    ])
    assert rc == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.strip().splitlines()]
    assert [r["value"] for r in rows] == ["on", "off"]
    assert rows[0]["strategy"] == "tr-jacobi" and rows[1]["strategy"] == "tree"


def test_sweep_train_noise_len_trains_per_value(workdir, capsys):
    cfg = workdir / "train.toml"
    subdir = workdir / "sweeps"
    rc = main([
        "sweep", "--axis", "train_noise_len", "--values", "0,2", "--config", str(cfg),
        "--task", "copy", "--n", "3", "--max-new", "10", "--workdir", str(subdir),
    ])
    assert rc == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.strip().splitlines()]
    assert [r["value"] for r in rows] == [0, 2]
    assert (subdir / "sweep_L0.ckpt").exists()
    assert (subdir / "sweep_L2.ckpt").exists()


def test_errors_exit_nonzero_with_message(workdir, capsys):
    assert main(["train", "--config", str(workdir / "missing.toml")]) == 1
    assert "error:" in capsys.readouterr().err
    ckpt = workdir / "model.ckpt"
    assert main(["bench", "--ckpt", str(ckpt), "--task", "copy", "--strategies", "warp"]) == 1
    assert "unknown strategy" in capsys.readouterr().err
    assert main(["sweep", "--axis", "train_noise_len", "--values", "1"]) == 1
    assert "needs --config" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["generate", "--ckpt", str(ckpt), "--strategy", "beam", "--prompt", "x"])


def test_bench_requires_a_suite(workdir, capsys):
    ckpt = workdir / "model.ckpt"
    assert main(["bench", "--ckpt", str(ckpt)]) == 1
    assert "--suite or --task" in capsys.readouterr().err
