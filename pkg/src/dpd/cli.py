"""Command-line interface.

Subcommands: schedule, synth, train, sample, continue, inpaint, metrics,
ablate, verify, checkpoint-info. All randomness sits behind --seed flags,
every file output is named explicitly, and report CSVs get a companion PNG
unless --no-plot is given. Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

# DPD_THREADS caps BLAS fan-out; must be set before numpy loads (default 1
# keeps runs deterministic across machines with different core counts)
_threads = os.environ.get("DPD_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import numpy as np

from . import fileio
from .errors import DpdError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpd",
        description="Desk-scale dual-path diffusion over latent sequences.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="emit an angle schedule as CSV (+PNG)")
    p.add_argument("--kind", choices=("uniform", "linear"), required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(handler=cmd_schedule)

    p = sub.add_parser("synth", help="generate a synthetic token/latent dataset")
    p.add_argument("--examples", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--channels", type=int, required=True)
    p.add_argument("--tokens-per-example", type=int, required=True)
    p.add_argument("--vocab", type=int, required=True)
    p.add_argument("--frames-per-token", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="train a model from a flat config file")
    p.add_argument("--config", required=True)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(handler=cmd_train)

    for name, help_text in (("sample", "generate a latent from noise"),
                            ("continue", "extend a latent by one chunk"),
                            ("inpaint", "regenerate masked frames")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--tokens", required=True,
                       help="token id file (whitespace-separated)")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--schedule", choices=("uniform", "linear"), default=None)
        p.add_argument("--cfg-scale", type=float, default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True,
                       help="latent output (.csv or binary container)")
        if name == "sample":
            p.add_argument("--frames", type=int, required=True)
            p.set_defaults(handler=cmd_sample)
        elif name == "continue":
            p.add_argument("--context", required=True,
                           help="clean context latent (.csv or container)")
            p.add_argument("--context-tokens", required=True)
            p.add_argument("--chunks", type=int, default=None,
                           help="chunk count M (default: checkpoint setting)")
            p.set_defaults(handler=cmd_continue)
        else:
            p.add_argument("--input", required=True,
                           help="latent to inpaint (.csv or container)")
            p.add_argument("--mask", required=True,
                           help="0/1 flags, one per frame")
            p.set_defaults(handler=cmd_inpaint)

    p = sub.add_parser("metrics", help="evaluate a checkpoint on a dataset dir")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--delta", type=float, default=float(np.pi / 4))
    p.add_argument("--chunks", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_metrics)

    p = sub.add_parser("ablate", help="compare schedules at several step counts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--steps-list", default="10,20",
                   help="comma-separated step counts")
    p.add_argument("--cfg-scale", type=float, default=1.0)
    p.add_argument("--max-examples", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("verify", help="run the verification suites")
    p.add_argument("suite", nargs="?", default="all",
                   choices=("identities", "gradients", "oracle", "all"))
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("checkpoint-info", help="describe a container file")
    p.add_argument("path")
    p.set_defaults(handler=cmd_info)
    return parser


# -- handlers ----------------------------------------------------------------


def cmd_schedule(args) -> int:
    from . import plotting
    from .schedule import make_schedule
    sched = make_schedule(args.kind, args.steps)
    fileio.write_schedule_csv(args.out, sched)
    print(f"wrote {args.out}")
    if not args.no_plot:
        png = plotting.png_sibling(args.out)
        plotting.render_schedule(sched, args.kind, png)
        print(f"wrote {png}")
    return 0


def cmd_synth(args) -> int:
    from .training import SynthDatasetSpec, synth_dataset
    spec = SynthDatasetSpec(num_examples=args.examples, frames=args.frames,
                            channels=args.channels,
                            tokens_per_example=args.tokens_per_example,
                            vocab=args.vocab, seed=args.seed,
                            frames_per_token=args.frames_per_token)
    data = synth_dataset(spec)
    os.makedirs(args.out, exist_ok=True)
    for i in range(len(data)):
        fileio.write_tokens(os.path.join(args.out, f"tokens_{i:04d}.txt"),
                            data.tokens[i])
        fileio.write_latent_csv(os.path.join(args.out, f"latent_{i:04d}.csv"),
                                data.latents[i])
    manifest = fileio.format_flat_config([
        ("num_examples", spec.num_examples), ("frames", spec.frames),
        ("channels", spec.channels),
        ("tokens_per_example", spec.tokens_per_example),
        ("vocab", spec.vocab), ("seed", spec.seed),
        ("frames_per_token", spec.frames_per_token),
    ])
    fileio.atomic_write_text(os.path.join(args.out, "dataset.cfg"), manifest)
    print(f"wrote {len(data)} examples to {args.out}")
    return 0


TRAIN_KEYS = {
    "dataset.num_examples": int, "dataset.frames": int, "dataset.channels": int,
    "dataset.tokens_per_example": int, "dataset.vocab": int, "dataset.seed": int,
    "dataset.frames_per_token": int, "dataset.holdout_examples": int,
    "model.hidden_dim": int, "model.block_count": int, "model.segment_size": int,
    "model.heads": int, "model.angle_encoder_mode": str, "model.seed": int,
    "train.steps": int, "train.batch_size": int, "train.learning_rate": float,
    "train.chunk_count": int, "train.cfg_dropout_prob": float, "train.seed": int,
    "train.eval_every": int,
    "out.dir": str,
}

TRAIN_DEFAULTS = {
    "dataset.seed": 0, "dataset.frames_per_token": 10,
    "dataset.holdout_examples": 16,
    "model.heads": 8, "model.angle_encoder_mode": "slerp", "model.seed": 0,
    "train.learning_rate": 5e-4, "train.chunk_count": 4,
    "train.cfg_dropout_prob": 0.1, "train.seed": 0, "train.eval_every": 200,
}


def cmd_train(args) -> int:
    import math
    from . import plotting
    from .checkpoint import save_checkpoint
    from .network import DpdConfig, DpdModel
    from .training import (SynthDatasetSpec, TrainConfig, run_training,
                           synth_dataset)

    with open(args.config, "r", encoding="utf-8") as f:
        text = f.read()
    cfg = dict(TRAIN_DEFAULTS)
    cfg.update(fileio.parse_flat_config(text, TRAIN_KEYS))
    required = ("dataset.num_examples", "dataset.frames", "dataset.channels",
                "dataset.tokens_per_example", "dataset.vocab",
                "model.hidden_dim", "model.block_count", "model.segment_size",
                "train.steps", "train.batch_size", "out.dir")
    missing = [k for k in required if k not in cfg]
    if missing:
        raise DpdError(f"{args.config}: missing required keys {missing}")

    out_dir = cfg["out.dir"]
    os.makedirs(out_dir, exist_ok=True)
    spec = SynthDatasetSpec(
        num_examples=cfg["dataset.num_examples"], frames=cfg["dataset.frames"],
        channels=cfg["dataset.channels"],
        tokens_per_example=cfg["dataset.tokens_per_example"],
        vocab=cfg["dataset.vocab"], seed=cfg["dataset.seed"],
        frames_per_token=cfg["dataset.frames_per_token"])
    holdout_spec = SynthDatasetSpec(
        num_examples=cfg["dataset.holdout_examples"], frames=spec.frames,
        channels=spec.channels, tokens_per_example=spec.tokens_per_example,
        vocab=spec.vocab, seed=spec.seed + 1,
        frames_per_token=spec.frames_per_token)
    data = synth_dataset(spec)
    holdout = synth_dataset(holdout_spec)

    config = DpdConfig(latent_dim=spec.channels, hidden_dim=cfg["model.hidden_dim"],
                       block_count=cfg["model.block_count"],
                       segment_size=cfg["model.segment_size"], vocab=spec.vocab,
                       heads=cfg["model.heads"],
                       angle_encoder_mode=cfg["model.angle_encoder_mode"],
                       seed=cfg["model.seed"])
    model = DpdModel.init(config)
    train_cfg = TrainConfig(
        steps=cfg["train.steps"], batch_size=cfg["train.batch_size"],
        learning_rate=cfg["train.learning_rate"],
        chunk_count=cfg["train.chunk_count"],
        cfg_dropout_prob=cfg["train.cfg_dropout_prob"], seed=cfg["train.seed"],
        eval_every=cfg["train.eval_every"])

    def on_checkpoint(step, mdl, result):
        save_checkpoint(mdl, os.path.join(out_dir, f"checkpoint_step{step}.dpd1"))
        if result.evals:
            s, mse, snri = result.evals[-1]
            print(f"step {step}: loss {result.losses[-1]:.4f} "
                  f"held-out vel-mse {mse:.4f} si-snri {snri:+.2f} dB")
        else:
            print(f"step {step}: loss {result.losses[-1]:.4f}")

    result = run_training(model, data, train_cfg, holdout=holdout,
                          on_checkpoint=on_checkpoint)

    save_checkpoint(model, os.path.join(out_dir, "model.dpd1"),
                    sampler_defaults={"chunk_count": train_cfg.chunk_count})
    loss_csv = os.path.join(out_dir, "loss.csv")
    fileio.write_loss_csv(loss_csv, result.losses)
    if not args.no_plot:
        plotting.render_loss_curve(result.losses, plotting.png_sibling(loss_csv),
                                   evals=result.evals)
    base = float(np.mean(result.losses[:10]))
    final = float(np.mean(result.losses[-10:]))
    report = [("steps", train_cfg.steps), ("early_loss_mean10", base),
              ("final_loss_mean10", final),
              ("final_over_early", final / base if base else math.nan)]
    if result.evals:
        report += [("holdout_velocity_mse", result.evals[-1][1]),
                   ("holdout_si_snri_db", result.evals[-1][2])]
    fileio.atomic_write_text(os.path.join(out_dir, "report.txt"),
                             fileio.format_flat_config(report))
    print(f"wrote {out_dir}/model.dpd1, loss.csv, report.txt")
    return 0


def _tokens_from_arg(value: str) -> np.ndarray:
    """Token ids from a file path, or inline whitespace/comma-separated ids."""
    if os.path.exists(value):
        return fileio.read_tokens(value)
    parts = value.replace(",", " ").split()
    if parts and all(p.lstrip("-").isdigit() for p in parts):
        return np.array([int(p) for p in parts], dtype=np.int64)
    raise DpdError(f"--tokens: {value!r} is neither a file nor a list of ids")


def _load_sampler(args, chunk_count=None):
    from .checkpoint import load_checkpoint
    from .sampler import SamplerConfig
    from .schedule import make_schedule
    model, defaults = load_checkpoint(args.checkpoint)
    kind = args.schedule or defaults.get("schedule", "linear")
    steps = args.steps or int(defaults.get("steps", 20))
    scale = args.cfg_scale if args.cfg_scale is not None else \
        float(defaults.get("cfg_scale", 2.5))
    chunks = chunk_count or int(defaults.get("chunk_count", 4))
    config = SamplerConfig(schedule=make_schedule(kind, steps), cfg_scale=scale,
                           seed=args.seed, chunk_count=chunks)
    return model, config


def cmd_sample(args) -> int:
    from .sampler import sample
    model, config = _load_sampler(args)
    tokens = _tokens_from_arg(args.tokens)
    latent = sample(tokens, model, config, frames=args.frames)
    fileio.write_latent(args.out, latent)
    print(f"wrote {args.out} ({latent.shape[0]} frames x {latent.shape[1]} channels)")
    return 0


def cmd_continue(args) -> int:
    from .diffusion import chunk_boundaries
    from .sampler import ContinuationState, continue_latent
    model, config = _load_sampler(args, chunk_count=args.chunks)
    context = fileio.read_latent(args.context)
    context_tokens = fileio.read_tokens(args.context_tokens)
    new_tokens = _tokens_from_arg(args.tokens)
    M = config.chunk_count
    new_frames = -(-context.shape[0] // max(M - 1, 1))
    window = context.shape[0] + new_frames
    layout = chunk_boundaries(window, M)
    state = ContinuationState(context, layout, context_tokens)
    latent = continue_latent(state, new_tokens, model, config)
    fileio.write_latent(args.out, latent)
    print(f"wrote {args.out} (window {window} frames, last "
          f"{state.new_chunk_frames} new)")
    return 0


def cmd_inpaint(args) -> int:
    from .sampler import inpaint
    model, config = _load_sampler(args)
    z_given = fileio.read_latent(args.input)
    mask = fileio.read_mask(args.mask)
    tokens = _tokens_from_arg(args.tokens)
    latent = inpaint(z_given, mask, tokens, model, config)
    fileio.write_latent(args.out, latent)
    print(f"wrote {args.out} ({int(mask.sum())} frames regenerated)")
    return 0


def _read_dataset_dir(path):
    from .training import SynthDataset, SynthDatasetSpec
    manifest = os.path.join(path, "dataset.cfg")
    keys = {"num_examples": int, "frames": int, "channels": int,
            "tokens_per_example": int, "vocab": int, "seed": int,
            "frames_per_token": int}
    with open(manifest, "r", encoding="utf-8") as f:
        fields = fileio.parse_flat_config(f.read(), keys)
    spec = SynthDatasetSpec(**fields)
    tokens = []
    latents = []
    for i in range(spec.num_examples):
        tokens.append(fileio.read_tokens(os.path.join(path, f"tokens_{i:04d}.txt")))
        latents.append(fileio.read_latent_csv(os.path.join(path,
                                                           f"latent_{i:04d}.csv")))
    return SynthDataset(spec, np.stack(tokens), np.stack(latents))


def cmd_metrics(args) -> int:
    from .checkpoint import load_checkpoint
    from .training import si_snri_eval, velocity_mse_eval
    model, _ = load_checkpoint(args.checkpoint)
    dataset = _read_dataset_dir(args.dataset)
    angles = np.full(args.chunks, args.delta)
    mse = velocity_mse_eval(model, dataset, angles, seed=args.seed)
    snri = si_snri_eval(model, dataset, args.delta, seed=args.seed + 1)
    report = [("examples", len(dataset)), ("delta", args.delta),
              ("velocity_mse", mse), ("si_snri_db", snri)]
    fileio.atomic_write_text(args.out, fileio.format_flat_config(report))
    print(f"velocity_mse = {mse:.6f}")
    print(f"si_snri_db = {snri:+.4f}")
    print(f"wrote {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from . import plotting
    from .checkpoint import load_checkpoint
    from .training import ablate_schedules
    model, _ = load_checkpoint(args.checkpoint)
    dataset = _read_dataset_dir(args.dataset)
    t_list = [int(s) for s in args.steps_list.split(",") if s]
    examples = [(dataset.tokens[i], dataset.latents[i])
                for i in range(min(args.max_examples, len(dataset)))]
    report = ablate_schedules(model, examples, t_list, cfg_scale=args.cfg_scale,
                              seed=args.seed)
    fileio.write_ablation_csv(args.out, report.rows)
    steps_csv = args.out[:-4] + "_steps.csv" if args.out.endswith(".csv") \
        else args.out + "_steps.csv"
    fileio.write_ablation_steps_csv(steps_csv, report.step_rows)
    print(f"wrote {args.out} and {steps_csv}")
    if not args.no_plot:
        png = plotting.png_sibling(args.out)
        plotting.render_ablation(report.rows, png)
        print(f"wrote {png}")
    for kind, T, err in report.rows:
        print(f"  {kind:8s} T={T:<4d} latent_mse={err:.6e}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_suites
    return run_suites(args.suite)


def cmd_info(args) -> int:
    from .checkpoint import container_info
    info = container_info(args.path)
    for key, value in sorted(info["fields"].items()):
        print(f"{key} = {value}")
    for name, shape, count in info["tensors"]:
        shape_s = "x".join(str(n) for n in shape)
        print(f"tensor {name}  shape {shape_s}  ({count} values)")
    print(f"total parameters: {info['total_parameters']}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (DpdError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
