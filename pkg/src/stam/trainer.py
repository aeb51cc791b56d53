"""Training loop: minibatching, Adam with decoupled weight decay, linear
warmup + cosine decay, evaluation, CSV metrics, checkpointing.

Everything that introduces randomness (parameter init, shuffling,
augmentation) draws from streams derived from one seed, so a fixed seed
reproduces a run bit-for-bit in deterministic mode. Deterministic mode
also pins BLAS to one thread and logs wall time as 0.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .data import (
    VideoClip,
    augment,
    read_checkpoint,
    read_dataset,
    uniform_sample,
    write_checkpoint,
)
from .errors import CheckpointError, ConfigError, ContractError
from .model import (
    ModelConfig,
    ModelParams,
    config_from_text,
    config_to_text,
    forward_batch,
    init_model,
    params_from_arrays,
    predict_batch,
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    peak_lr: float = 3e-3
    warmup_steps: int = 20
    min_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None
    seed: int = 0
    flip: bool = False
    crop_size: int | None = None
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(
                f"epochs={self.epochs}, batch_size={self.batch_size} invalid"
            )
        if not self.peak_lr > self.min_lr >= 0:
            raise ConfigError(
                f"need peak_lr > min_lr >= 0, got peak={self.peak_lr} "
                f"min={self.min_lr}"
            )
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear 0 -> peak over warmup steps, then half-cosine peak -> min.

    Steps past total_steps clamp to min_lr.
    """
    warmup = config.warmup_steps
    if step <= warmup and warmup > 0:
        return config.peak_lr * step / warmup
    if step > total_steps:
        return config.min_lr
    denom = max(total_steps - warmup, 1)
    progress = (step - warmup) / denom
    return config.min_lr + (config.peak_lr - config.min_lr) * 0.5 * (
        1.0 + math.cos(math.pi * progress)
    )


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, state: AdamState, lr: float, config: TrainConfig):
    """One Adam update over named tensors (sorted order), in place.

    Weight decay is decoupled: applied directly to the weights, not mixed
    into the moment estimates.
    """
    state.t += 1
    t = state.t
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name in sorted(params):
        p = params[name]
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient")
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        if config.weight_decay:
            update = update + config.weight_decay * p.data
        p.data = p.data - lr * update


def clip_gradients(params: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        if g is not None:
            total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for name in sorted(params):
            if params[name].grad is not None:
                params[name].grad = params[name].grad * scale
    return norm


@dataclass
class Metrics:
    """Per-epoch aggregates plus the per-step learning-rate trace."""

    epochs: list = field(default_factory=list)  # dict rows
    lr_trace: list = field(default_factory=list)

    CSV_HEADER = "epoch,step,lr,train_loss,train_acc,val_acc,wall_s"

    def to_csv(self, path):
        lines = [self.CSV_HEADER]
        for row in self.epochs:
            lines.append(
                "%d,%d,%.6f,%.6f,%.6f,%.6f,%.6f"
                % (
                    row["epoch"],
                    row["step"],
                    row["lr"],
                    row["train_loss"],
                    row["train_acc"],
                    row["val_acc"],
                    row["wall_s"],
                )
            )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def _clips_to_batch(clips: list[VideoClip], F: int) -> np.ndarray:
    out = []
    for c in clips:
        t_total = c.frames.shape[0]
        idx = uniform_sample(t_total, F)
        out.append(np.asarray(c.frames, dtype=np.float64)[idx])
    return np.stack(out)


def _check_dataset(clips, num_classes, config: ModelConfig, what: str):
    if not clips:
        raise ContractError(f"{what} dataset is empty")
    t_total, h, w, c = clips[0].frames.shape
    if (h, w, c) != (config.H, config.W, config.C):
        raise ConfigError(
            f"{what} frames are {h}x{w}x{c}, model expects "
            f"{config.H}x{config.W}x{config.C}"
        )
    if t_total < config.F:
        raise ConfigError(
            f"{what} clips have {t_total} frames, model samples {config.F}"
        )
    if num_classes != config.num_classes:
        raise ConfigError(
            f"{what} has {num_classes} classes, model expects "
            f"{config.num_classes}"
        )


def evaluate_params(
    params: ModelParams, clips: list[VideoClip], batch_size: int = 64
) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class id."""
    if not clips:
        raise ContractError("cannot evaluate on an empty dataset")
    config = params.config
    hits = 0
    for i in range(0, len(clips), batch_size):
        chunk = clips[i : i + batch_size]
        batch = _clips_to_batch(chunk, config.F)
        preds = predict_batch(batch, params)
        hits += int(np.sum(preds == np.array([c.label for c in chunk])))
    return hits / len(clips)


def evaluate(ckpt_path, data_path, batch_size: int = 64) -> float:
    """Load a checkpoint and a dataset, return top-1 accuracy."""
    cfg_text, arrays = read_checkpoint(ckpt_path)
    config = config_from_text(cfg_text)
    params = params_from_arrays(config, arrays)
    clips, num_classes = read_dataset(data_path)
    if not clips:
        raise ContractError("cannot evaluate on an empty dataset")
    try:
        _check_dataset(clips, num_classes, config, "eval")
    except ConfigError as e:
        raise CheckpointError(str(e)) from e
    return evaluate_params(params, clips, batch_size)


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_path,
    val_path,
    ckpt_path=None,
    metrics_path=None,
):
    """Run the full training loop; returns (params, metrics).

    Writes the final checkpoint and the metrics CSV when paths are given.
    """
    limit = 1 if train_config.deterministic else None
    with threadpool_limits(limits=limit):
        return _train_inner(
            model_config, train_config, train_path, val_path, ckpt_path,
            metrics_path,
        )


def _train_inner(
    model_config, train_config, train_path, val_path, ckpt_path, metrics_path
):
    train_clips, n_cls_train = read_dataset(train_path)
    val_clips, n_cls_val = read_dataset(val_path)
    _check_dataset(train_clips, n_cls_train, model_config, "train")
    _check_dataset(val_clips, n_cls_val, model_config, "val")
    if train_config.crop_size is not None and train_config.crop_size != model_config.H:
        raise ConfigError(
            f"crop_size={train_config.crop_size} does not match model "
            f"H={model_config.H}"
        )

    ss = np.random.SeedSequence(train_config.seed)
    init_ss, shuffle_ss, augment_ss = ss.spawn(3)
    params = init_model(model_config, init_ss)
    trainable = params.trainable_tensors()
    state = AdamState()
    metrics = Metrics()

    n = len(train_clips)
    bs = train_config.batch_size
    steps_per_epoch = (n + bs - 1) // bs
    total_steps = train_config.epochs * steps_per_epoch
    if train_config.epochs > 0 and train_config.warmup_steps >= total_steps:
        raise ConfigError(
            f"warmup_steps={train_config.warmup_steps} must be below total "
            f"steps {total_steps}"
        )

    shuffle_rng = np.random.default_rng(shuffle_ss)
    augment_rng = np.random.default_rng(augment_ss)
    do_augment = train_config.flip or train_config.crop_size is not None
    crop = (
        train_config.crop_size
        if train_config.crop_size is not None
        else model_config.H
    )

    t_start = time.perf_counter()
    step = 0
    labels_arr = np.array([c.label for c in train_clips])
    for epoch in range(1, train_config.epochs + 1):
        order = shuffle_rng.permutation(n)
        losses = []
        hits = 0
        for lo in range(0, n, bs):
            batch_idx = order[lo : lo + bs]
            chunk = [train_clips[i] for i in batch_idx]
            if do_augment:
                chunk = [
                    augment(c, augment_rng, train_config.flip, crop)[0]
                    for c in chunk
                ]
            batch = _clips_to_batch(chunk, model_config.F)
            labels = labels_arr[batch_idx]
            for t in trainable.values():
                t.zero_grad()
            with T.Graph() as g:
                logits = forward_batch(batch, params)
                loss = T.cross_entropy(logits, labels)
                g.backward(loss)
            step += 1
            lr = lr_schedule(step, total_steps, train_config)
            metrics.lr_trace.append(lr)
            if train_config.grad_clip is not None:
                clip_gradients(trainable, train_config.grad_clip)
            optimizer_step(trainable, state, lr, train_config)
            losses.append(loss.item())
            hits += int(np.sum(logits.data.argmax(axis=-1) == labels))
        val_acc = evaluate_params(params, val_clips)
        wall = 0.0 if train_config.deterministic else time.perf_counter() - t_start
        metrics.epochs.append(
            {
                "epoch": epoch,
                "step": step,
                "lr": lr,
                "train_loss": float(np.mean(losses)),
                "train_acc": hits / n,
                "val_acc": val_acc,
                "wall_s": wall,
            }
        )

    if ckpt_path is not None:
        save_checkpoint(ckpt_path, params)
    if metrics_path is not None:
        metrics.to_csv(metrics_path)
    return params, metrics


def save_checkpoint(path, params: ModelParams):
    arrays = {k: t.data for k, t in params.named_tensors().items()}
    write_checkpoint(path, config_to_text(params.config), arrays)
