import math
import os

import numpy as np
import pytest

from dpd import fileio
from dpd.checkpoint import save_checkpoint
from dpd.cli import main
from dpd.errors import ConfigError
from dpd.network import DpdConfig, DpdModel


@pytest.fixture
def tiny_checkpoint(tmp_path):
    model = DpdModel.init(DpdConfig(latent_dim=2, hidden_dim=8, block_count=2,
                                    segment_size=4, vocab=6, heads=2, seed=60))
    path = str(tmp_path / "model.dpd1")
    save_checkpoint(model, path)
    return path


def test_schedule_csv_round_trip(tmp_path):
    out = str(tmp_path / "sched.csv")
    assert main(["schedule", "--kind", "linear", "--steps", "10",
                 "--out", out, "--no-plot"]) == 0
    with open(out) as f:
        lines = f.read().strip().splitlines()
    assert lines[0] == "t,omega,delta"
    assert len(lines) == 11
    omegas = [float(line.split(",")[1]) for line in lines[1:]]
    assert abs(math.fsum(omegas) - math.pi / 2) < 1e-12


def test_schedule_plot_written(tmp_path):
    out = str(tmp_path / "sched.csv")
    assert main(["schedule", "--kind", "uniform", "--steps", "5",
                 "--out", out]) == 0
    assert os.path.exists(str(tmp_path / "sched.png"))


def test_unknown_subcommand_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_unknown_flag_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["schedule", "--kind", "linear", "--steps", "5", "--wrong", "x"])
    assert exc.value.code == 2


def test_runtime_failure_exit_one(tmp_path):
    code = main(["checkpoint-info", str(tmp_path / "missing.dpd1")])
    assert code == 1


def test_synth_then_sample_closed_loop(tmp_path, tiny_checkpoint):
    data_dir = str(tmp_path / "data")
    assert main(["synth", "--examples", "2", "--frames", "12", "--channels", "2",
                 "--tokens-per-example", "3", "--vocab", "6",
                 "--frames-per-token", "4", "--seed", "3",
                 "--out", data_dir]) == 0
    out = str(tmp_path / "sample.csv")
    assert main(["sample", "--checkpoint", tiny_checkpoint,
                 "--tokens", os.path.join(data_dir, "tokens_0000.txt"),
                 "--frames", "12", "--steps", "3", "--schedule", "uniform",
                 "--cfg-scale", "1.0", "--seed", "5", "--out", out]) == 0
    latent = fileio.read_latent_csv(out)
    assert latent.shape == (12, 2)


def test_sample_deterministic_across_runs(tmp_path, tiny_checkpoint):
    tok = str(tmp_path / "tok.txt")
    fileio.write_tokens(tok, [1, 2, 3])
    outs = []
    for name in ("a.csv", "b.csv"):
        out = str(tmp_path / name)
        assert main(["sample", "--checkpoint", tiny_checkpoint, "--tokens", tok,
                     "--frames", "8", "--steps", "2", "--seed", "9",
                     "--out", out]) == 0
        outs.append(open(out).read())
    assert outs[0] == outs[1]


def test_continue_and_inpaint_cli(tmp_path, tiny_checkpoint):
    tok = str(tmp_path / "tok.txt")
    fileio.write_tokens(tok, [2])
    ctx_tok = str(tmp_path / "ctx_tok.txt")
    fileio.write_tokens(ctx_tok, [1, 3, 4])
    ctx = str(tmp_path / "ctx.csv")
    rng = np.random.default_rng(0)
    context = rng.uniform(-0.9, 0.9, (9, 2))
    fileio.write_latent_csv(ctx, context)
    out = str(tmp_path / "cont.csv")
    assert main(["continue", "--checkpoint", tiny_checkpoint, "--tokens", tok,
                 "--context", ctx, "--context-tokens", ctx_tok, "--chunks", "4",
                 "--steps", "2", "--seed", "4", "--out", out]) == 0
    cont = fileio.read_latent_csv(out)
    assert cont.shape == (12, 2)
    # context survives the CSV round trip bit-exactly (17 significant digits)
    assert np.array_equal(cont[:9], context)

    z = str(tmp_path / "given.csv")
    fileio.write_latent_csv(z, rng.uniform(-0.9, 0.9, (12, 2)))
    mask = str(tmp_path / "mask.txt")
    fileio.atomic_write_text(mask, " ".join(["0"] * 4 + ["1"] * 4 + ["0"] * 4) + "\n")
    out2 = str(tmp_path / "inp.csv")
    assert main(["inpaint", "--checkpoint", tiny_checkpoint, "--tokens", tok,
                 "--input", z, "--mask", mask, "--steps", "2", "--seed", "4",
                 "--out", out2]) == 0
    assert fileio.read_latent_csv(out2).shape == (12, 2)


def test_checkpoint_info_output(tiny_checkpoint, capsys):
    assert main(["checkpoint-info", tiny_checkpoint]) == 0
    out = capsys.readouterr().out
    assert "total parameters:" in out
    assert "w_out" in out


def test_metrics_and_ablate(tmp_path, tiny_checkpoint, capsys):
    data_dir = str(tmp_path / "data")
    assert main(["synth", "--examples", "3", "--frames", "12", "--channels", "2",
                 "--tokens-per-example", "3", "--vocab", "6",
                 "--frames-per-token", "4", "--seed", "3",
                 "--out", data_dir]) == 0
    report = str(tmp_path / "metrics.txt")
    assert main(["metrics", "--checkpoint", tiny_checkpoint,
                 "--dataset", data_dir, "--chunks", "3", "--out", report]) == 0
    text = open(report).read()
    assert "velocity_mse" in text and "si_snri_db" in text

    out = str(tmp_path / "ablate.csv")
    assert main(["ablate", "--checkpoint", tiny_checkpoint, "--dataset", data_dir,
                 "--steps-list", "2,3", "--max-examples", "1",
                 "--out", out, "--no-plot"]) == 0
    lines = open(out).read().strip().splitlines()
    assert lines[0] == "schedule,steps,latent_mse"
    assert len(lines) == 5  # 2 step counts x 2 schedules
    assert os.path.exists(str(tmp_path / "ablate_steps.csv"))


def test_train_cli_small(tmp_path):
    cfg = str(tmp_path / "train.cfg")
    out_dir = str(tmp_path / "run")
    fileio.atomic_write_text(cfg, "\n".join([
        "# tiny smoke-test run",
        "dataset.num_examples = 6",
        "dataset.frames = 12",
        "dataset.channels = 2",
        "dataset.tokens_per_example = 3",
        "dataset.vocab = 6",
        "dataset.frames_per_token = 4",
        "dataset.holdout_examples = 2",
        "model.hidden_dim = 8",
        "model.block_count = 2",
        "model.segment_size = 4",
        "model.heads = 2",
        "train.steps = 6",
        "train.batch_size = 2",
        "train.eval_every = 3",
        f"out.dir = {out_dir}",
    ]) + "\n")
    assert main(["train", "--config", cfg, "--no-plot"]) == 0
    assert os.path.exists(os.path.join(out_dir, "model.dpd1"))
    assert os.path.exists(os.path.join(out_dir, "loss.csv"))
    assert os.path.exists(os.path.join(out_dir, "report.txt"))
    assert os.path.exists(os.path.join(out_dir, "checkpoint_step6.dpd1"))


def test_train_config_rejects_unknown_keys(tmp_path):
    cfg = str(tmp_path / "bad.cfg")
    fileio.atomic_write_text(cfg, "train.stepz = 5\n")
    assert main(["train", "--config", cfg]) == 1


def test_flat_config_parsing_errors():
    with pytest.raises(ConfigError, match="unknown key"):
        fileio.parse_flat_config("nope = 1\n", {"yes": int})
    with pytest.raises(ConfigError, match="duplicate"):
        fileio.parse_flat_config("a = 1\na = 2\n", {"a": int})
    with pytest.raises(ConfigError, match="bad value"):
        fileio.parse_flat_config("a = x\n", {"a": int})
    assert fileio.parse_flat_config("# comment\n\na = 3\n", {"a": int}) == {"a": 3}


def test_verify_cli_identities(capsys):
    assert main(["verify", "identities"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out.replace("FAILED: 0", "")
