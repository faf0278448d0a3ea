"""Command-line entry points: synth, train, register, evaluate, sweep.

Runs are driven by an INI config file with [model], [loss], [train],
[data] and [output] sections; command-line flags override it. Every
config-driven run writes the fully-resolved config next to its outputs
so it can be reproduced from that file alone.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import evaluation, synth, training, volumes
from .fields import AffineTransform, njd_percent, warp
from .losses import LossConfig
from .network import ModelConfig
from .synth import SyntheticPairSpec


def _parse_tuple(text, cast=int):
    return tuple(cast(part) for part in str(text).replace("(", " ").replace(")", " ")
                 .replace(",", " ").split())


def write_config_ini(path, config, data=None, output=None):
    parser = configparser.ConfigParser()
    model = config.model
    parser["model"] = {
        "affine_steps": str(model.affine_steps),
        "deform_steps": str(model.deform_steps),
        "encoder_dims": ",".join(map(str, model.encoder_dims)),
        "decoder_dims": ",".join(map(str, model.decoder_dims)),
        "attn_heads": ",".join(map(str, model.attn_heads)),
        "window_size": ",".join(map(str, model.window_size)),
        "variant": model.variant,
    }
    parser["loss"] = {
        "sigma": repr(config.loss.sigma),
        "lambda": repr(config.loss.lam),
        "ncc_window": str(config.loss.ncc_window),
        "epsilon": repr(config.loss.epsilon),
    }
    parser["train"] = {
        "iterations": str(config.iterations),
        "learning_rate": repr(config.learning_rate),
        "batch_size": str(config.batch_size),
        "seed": str(config.seed),
        "checkpoint_interval": str(config.checkpoint_interval),
        "validation_pairs": str(config.validation_pairs),
    }
    if config.clip_grad_norm is not None:
        parser["train"]["clip_grad_norm"] = repr(config.clip_grad_norm)
    parser["data"] = {k: str(v) for k, v in (data or {}).items()}
    parser["output"] = {k: str(v) for k, v in (output or {}).items()}
    with open(path, "w") as handle:
        parser.write(handle)


def read_config_ini(path):
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(f"config file not found: {path}")

    model_kw = {}
    if parser.has_section("model"):
        section = parser["model"]
        affine = section.getint("affine_steps", 1)
        deform = section.getint("deform_steps", 4)
        variant = section.get("variant", "trans_decoder")
        window = _parse_tuple(section.get("window_size", "5,5,5"))
        base = ModelConfig.for_steps(affine, deform, variant=variant, window_size=window)
        model_kw = base.to_dict()
        for key in ("encoder_dims", "decoder_dims", "attn_heads"):
            if section.get(key, None):
                model_kw[key] = _parse_tuple(section[key])
        model = ModelConfig.from_dict(model_kw)
    else:
        model = ModelConfig()

    loss_kw = {}
    if parser.has_section("loss"):
        section = parser["loss"]
        loss_kw = {
            "sigma": section.getfloat("sigma", 1.0),
            "lam": section.getfloat("lambda", 1e-4),
            "ncc_window": section.getint("ncc_window", 9),
            "epsilon": section.getfloat("epsilon", 1e-5),
        }
    loss = LossConfig(**loss_kw)

    train_kw = dict(model=model, loss=loss)
    if parser.has_section("train"):
        section = parser["train"]
        train_kw.update(
            iterations=section.getint("iterations", 1000),
            learning_rate=section.getfloat("learning_rate", 1e-4),
            batch_size=section.getint("batch_size", 1),
            seed=section.getint("seed", 0),
            checkpoint_interval=section.getint("checkpoint_interval", 200),
            validation_pairs=section.getint("validation_pairs", 2),
        )
        if section.get("clip_grad_norm", None):
            train_kw["clip_grad_norm"] = section.getfloat("clip_grad_norm")
    config = training.TrainConfig(**train_kw)

    data = dict(parser["data"]) if parser.has_section("data") else {}
    output = dict(parser["output"]) if parser.has_section("output") else {}
    return config, data, output


def _load_training_data(dataset_dir, validation_pairs):
    """Flatten a synthetic dataset into training volumes plus fresh
    held-out validation pairs regenerated from the recorded spec."""
    pairs = synth.load_dataset(dataset_dir)
    volumes_np = []
    for pair in pairs:
        volumes_np.extend([pair.fixed, pair.moving])
    val_pairs = []
    base_spec = pairs[0].spec
    if base_spec is not None and validation_pairs > 0:
        for i in range(validation_pairs):
            val_spec = replace(base_spec, seed=base_spec.seed + 10_000 + i)
            val_pairs.append(synth.synth_pair(val_spec))
    return volumes_np, val_pairs


def _preprocess(fixed, moving, skip):
    if skip:
        return fixed, moving
    fixed = volumes.normalize_intensity(fixed)
    moving = volumes.normalize_intensity(moving)
    if moving.shape != fixed.shape:
        moving = volumes.crop_or_pad(moving, fixed.shape)
    moving = volumes.com_initialize(fixed, moving)
    return fixed, moving


def cmd_synth(args):
    spec = SyntheticPairSpec(
        seed=args.seed, shape=tuple(_parse_tuple(args.shape)),
        rotation_max=args.rot, translation_max=args.trans, scale_max=args.scale,
        deform_amplitude=args.deform_amp, deform_scale=args.deform_scale,
        num_blobs=args.blobs)
    names = synth.generate_dataset(args.out, spec, args.n)
    print(f"wrote {len(names)} pairs to {args.out}")
    return 0


def cmd_train(args):
    config, data, output = read_config_ini(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.iterations is not None:
        config = replace(config, iterations=args.iterations)
    if args.no_affine:
        config = replace(config, model=ModelConfig.for_steps(
            0, config.model.deform_steps, variant=config.model.variant,
            window_size=config.model.window_size))

    out_dir = Path(args.out or output.get("out") or "run")
    dataset_dir = args.dataset or data.get("dataset")
    if dataset_dir is None:
        raise ValueError("no dataset: pass --dataset or set [data] dataset in the config")

    volumes_np, val_pairs = _load_training_data(dataset_dir, config.validation_pairs)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config_ini(out_dir / "config_resolved.ini", config,
                     data={"dataset": dataset_dir}, output={"out": out_dir})

    result = training.train(config, volumes_np, out_dir=out_dir,
                            val_pairs=val_pairs, resume_from=args.resume)
    print(f"checkpoint: {result.checkpoint_path}")
    if result.history:
        last = result.history[-1]
        print(f"final loss: total={last['total']:.6f} ncc={last['ncc']:.6f}")
    return 0


def cmd_register(args):
    model, config = training.model_from_checkpoint(args.checkpoint)
    if args.no_affine and config.model.affine_steps != 0:
        raise ValueError(
            "--no-affine requires a checkpoint trained with affine_steps=0 "
            f"(this one has {config.model.affine_steps})")
    if args.affine_only and config.model.affine_steps == 0:
        raise ValueError("--affine-only requires a model with affine steps")

    fixed = volumes.load_volume(args.fixed)
    moving = volumes.load_volume(args.moving)
    fixed, moving = _preprocess(fixed, moving, args.no_preprocess)
    if fixed.shape != moving.shape:
        raise ValueError(f"shape mismatch after preprocessing: "
                         f"{fixed.shape} vs {moving.shape}")

    result = evaluation.register_volumes(model, fixed, moving)
    if args.affine_only:
        field = model.affine_only_field(result, fixed.shape)
        warped = warp(torch.as_tensor(moving)[None, None], field)[0, 0].numpy()
    else:
        field = result.final_field
        warped = result.warped[0, 0].numpy()
    field_np = field[0].numpy()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    volumes.save_volume(out / "fixed_preproc.nii.gz", fixed)
    volumes.save_volume(out / "moving_preproc.nii.gz", moving)
    volumes.save_volume(out / "warped.nii.gz", warped)
    volumes.save_field(out / "field.nii.gz", field_np)
    volumes.save_volume(out / "difference.nii.gz",
                        evaluation.difference_map(warped, fixed))
    if result.affine is not None:
        AffineTransform(result.affine[0].numpy()).save_txt(out / "affine.txt")

    line = (f"registered: njd={njd_percent(field_np):.4f}% "
            f"mean|diff|={float(np.abs(warped - fixed).mean()):.6f} -> {out}")
    print(line)
    (out / "report.txt").write_text(line + "\n")
    return 0


def cmd_evaluate(args):
    model, _ = training.model_from_checkpoint(args.checkpoint)
    pairs = synth.load_dataset(args.dataset)
    if not pairs:
        raise ValueError("no pairs in dataset")
    records = []
    for i, pair in enumerate(pairs):
        fixed, moving = pair.fixed, pair.moving
        records.append(evaluation.evaluate_pair(
            model, fixed, moving, pair.labels_fixed, pair.labels_moving,
            pair_id=f"pair_{i:03d}", repeats=args.repeats))
    text, csv_text = evaluation.report(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "records.csv").write_text(evaluation.records_csv(records))
    (out / "report.txt").write_text(text + "\n")
    (out / "report.csv").write_text(csv_text)
    print(text)
    return 0


def _parse_sweep_values(axis, text):
    if axis == "steps":
        pairs = [p for p in text.split(";") if p.strip()]
        return [tuple(_parse_tuple(p)) for p in pairs]
    if axis == "lambda":
        return [float(v) for v in text.split(",") if v.strip()]
    return [v.strip() for v in text.split(",") if v.strip()]


def cmd_sweep(args):
    config, data, output = read_config_ini(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    out_dir = Path(args.out or output.get("out") or "sweep")
    dataset_dir = args.dataset or data.get("dataset")
    if dataset_dir is None:
        raise ValueError("no dataset: pass --dataset or set [data] dataset in the config")
    values = _parse_sweep_values(args.axis, args.values)
    if not values:
        raise ValueError("no sweep values given")

    volumes_np, val_pairs = _load_training_data(dataset_dir, config.validation_pairs)
    if not val_pairs:
        raise ValueError("sweep needs validation pairs (synthetic dataset with spec files)")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config_ini(out_dir / "config_resolved.ini", config,
                     data={"dataset": dataset_dir}, output={"out": out_dir})

    rows, text, _ = training.sweep(config, args.axis, values, volumes_np,
                                   val_pairs, out_dir=out_dir)
    print(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="c2freg",
                                     description="coarse-to-fine joint affine + "
                                                 "deformable 3D registration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic pair dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", default="32,32,32")
    p.add_argument("--rot", type=float, default=0.05)
    p.add_argument("--trans", type=float, default=2.0)
    p.add_argument("--scale", type=float, default=0.03)
    p.add_argument("--deform-amp", type=float, default=1.5)
    p.add_argument("--deform-scale", type=float, default=4.0)
    p.add_argument("--blobs", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume")
    p.add_argument("--no-affine", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register one pair with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--affine-only", action="store_true")
    p.add_argument("--no-affine", action="store_true")
    p.add_argument("--no-preprocess", action="store_true")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train once per value along a config axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=training.SWEEP_AXES)
    p.add_argument("--values", required=True)
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
