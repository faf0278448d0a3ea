"""Unsupervised training loop: random pairs, Adam, deterministic seeding,
checkpoint/resume, validation monitoring, and sweeps over config axes."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import evaluation
from .losses import LossConfig, total_loss
from .network import C2FRegNet, ModelConfig, build_model, count_params

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    learning_rate: float = 1e-4
    batch_size: int = 1
    seed: int = 0
    checkpoint_interval: int = 200
    validation_pairs: int = 2
    clip_grad_norm: float | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["loss"] = LossConfig(**d["loss"])
        d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


@dataclass
class TrainResult:
    model: C2FRegNet
    config: TrainConfig
    history: list
    checkpoint_path: Path | None


def sample_pair(dataset, rng):
    """Two distinct indices drawn uniformly; order is part of the draw."""
    n = len(dataset)
    if n < 2:
        raise ValueError(f"need at least 2 volumes to sample a pair, got {n}")
    i = int(rng.integers(n))
    j = int(rng.integers(n - 1))
    if j >= i:
        j += 1
    return dataset[i], dataset[j]


def save_checkpoint(path, model, optimizer, iteration, config, pair_rng, history):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "train_config": config.to_dict(),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng_state": torch.get_rng_state(),
        "pair_rng_state": pair_rng.bit_generator.state if pair_rng is not None else None,
        "history": history,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    return payload


def model_from_checkpoint(payload_or_path):
    if not isinstance(payload_or_path, dict):
        payload_or_path = load_checkpoint(payload_or_path)
    config = TrainConfig.from_dict(payload_or_path["train_config"])
    model = C2FRegNet(config.model)
    model.load_state_dict(payload_or_path["model_state"])
    model.eval()
    return model, config


def _as_pair_tensor(volumes_np):
    stack = np.stack([np.asarray(v, dtype=np.float32) for v in volumes_np])
    return torch.as_tensor(stack)[:, None]


def _log(handle, line):
    if handle is not None:
        handle.write(line + "\n")
        handle.flush()


def _validate(model, val_pairs):
    records = [
        evaluation.evaluate_pair(model, p.fixed, p.moving, p.labels_fixed,
                                 p.labels_moving, pair_id=f"val_{i}", repeats=1)
        for i, p in enumerate(val_pairs)
    ]
    mean_dsc = float(np.mean([r.dsc_after for r in records]))
    mean_njd = float(np.mean([r.njd_percent for r in records]))
    return mean_dsc, mean_njd


def train(config, dataset, out_dir=None, val_pairs=None, resume_from=None):
    """Optimize the model on random pairs from `dataset` (a sequence of
    float volumes). Writes `loss.log` and periodic checkpoints when
    `out_dir` is given; returns the final state either way.

    `resume_from` continues a saved run bit-exactly: RNG streams, model
    and optimizer state are all restored from the checkpoint.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        saved = TrainConfig.from_dict(payload["train_config"])
        if config is None:
            config = saved
        elif replace(config, iterations=saved.iterations) != saved:
            raise ValueError(
                "resume config differs from the checkpoint; only iterations "
                "may change on resume")
        model = C2FRegNet(config.model)
        model.load_state_dict(payload["model_state"])
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        if payload["optimizer_state"] is not None:
            optimizer.load_state_dict(payload["optimizer_state"])
        torch.set_rng_state(payload["torch_rng_state"])
        pair_rng = np.random.default_rng()
        pair_rng.bit_generator.state = payload["pair_rng_state"]
        start = payload["iteration"]
        history = list(payload["history"])
    else:
        model = build_model(config.model, config.seed)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        pair_rng = np.random.default_rng(config.seed)
        start = 0
        history = []

    model.train()
    log_handle = (out_dir / "loss.log").open("a") if out_dir is not None else None
    ckpt_path = out_dir / "checkpoint.pt" if out_dir is not None else None

    try:
        if start == 0 and out_dir is not None:
            save_checkpoint(ckpt_path, model, optimizer, 0, config, pair_rng, history)

        for it in range(start + 1, config.iterations + 1):
            fixed_np, moving_np = [], []
            for _ in range(config.batch_size):
                f, m = sample_pair(dataset, pair_rng)
                fixed_np.append(f)
                moving_np.append(m)
            fixed = _as_pair_tensor(fixed_np)
            moving = _as_pair_tensor(moving_np)

            result = model(fixed, moving)
            loss, parts = total_loss(result.warped, fixed, result.final_field, config.loss)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at iteration {it}: {parts} "
                    f"(batch of {config.batch_size}, shape {tuple(fixed.shape)})")

            optimizer.zero_grad()
            loss.backward()
            if config.clip_grad_norm is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_grad_norm)
            optimizer.step()

            entry = {"iteration": it, **parts}
            history.append(entry)
            _log(log_handle, "iter={iteration} total={total:.6e} ncc={ncc:.6e} "
                             "diffusion={diffusion:.6e} jd={jd:.6e}".format(**entry))

            if it % config.checkpoint_interval == 0 or it == config.iterations:
                if ckpt_path is not None:
                    save_checkpoint(ckpt_path, model, optimizer, it, config, pair_rng, history)
                if val_pairs:
                    val_dsc, val_njd = _validate(model, val_pairs)
                    model.train()
                    _log(log_handle,
                         f"val iter={it} dsc={val_dsc:.6f} njd={val_njd:.6f}")

    finally:
        if log_handle is not None:
            log_handle.close()

    model.eval()
    return TrainResult(model=model, config=config, history=history,
                       checkpoint_path=ckpt_path)


def smoothed(values, window=50):
    """Trailing moving average used for loss-curve sanity checks."""
    values = list(values)
    if not values:
        return []
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(values[lo : i + 1])))
    return out


SWEEP_AXES = ("steps", "lambda", "variant")


def sweep(base, axis, values, dataset, val_pairs, out_dir=None):
    """One full training run per value on a shared seed and dataset.

    axis "steps": values are (affine_steps, deform_steps) tuples;
    axis "lambda": values are folding-penalty weights;
    axis "variant": values are module-placement names.
    Returns (rows, text_table, csv_text); rows carry the config label,
    mean DSC, NJD%, runtime and parameter count for each run.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")

    configs = []
    for value in values:
        if axis == "steps":
            a, d = value
            label = f"steps_{a}_{d}"
            cfg = replace(base, model=ModelConfig.for_steps(
                a, d, variant=base.model.variant, window_size=base.model.window_size))
        elif axis == "lambda":
            label = f"lambda_{value:g}"
            cfg = replace(base, loss=replace(base.loss, lam=float(value)))
        else:
            label = f"variant_{value}"
            cfg = replace(base, model=replace(base.model, variant=str(value)))
        configs.append((label, cfg))

    rows = []
    grouping = {}
    for label, cfg in configs:
        run_dir = None if out_dir is None else Path(out_dir) / label
        start = time.perf_counter()
        result = train(cfg, dataset, out_dir=run_dir, val_pairs=None)
        train_seconds = time.perf_counter() - start
        records = [
            evaluation.evaluate_pair(result.model, p.fixed, p.moving,
                                     p.labels_fixed, p.labels_moving,
                                     pair_id=f"{label}_{i}", repeats=1)
            for i, p in enumerate(val_pairs)
        ]
        grouping[label] = records
        rows.append({
            "label": label,
            "dsc": float(np.mean([r.dsc_after for r in records])),
            "njd_percent": float(np.mean([r.njd_percent for r in records])),
            "runtime_s": float(np.mean([r.runtime_seconds for r in records])),
            "train_s": train_seconds,
            "params": count_params(result.model)["total"],
        })

    text, csv_text = evaluation.report(None, grouping)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep_report.txt").write_text(text + "\n")
        (out / "sweep_report.csv").write_text(csv_text)
    return rows, text, csv_text
