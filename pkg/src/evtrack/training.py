"""Training objective and toy training loop.

The per-window loss is an L1 distance between each refinement iteration's
trajectory snapshot and ground truth, weighted exponentially so later
iterations count more (gamma^(M-m) for snapshot m of M); window losses
accumulate over a sequence. Optimization is decoupled-weight-decay Adam
with linear warm-up followed by cosine decay.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, adamw_step, backward, ops
from .autodiff.params import read_weight_file, save_arrays, save_weights
from .errors import TrainingError, UsageError
from .pipeline import TrackerModel, run_offline


@dataclass
class LossConfig:
    gamma: float = 0.8  # iteration weight base; later snapshots weigh more

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise UsageError(f"gamma must be in (0, 1], got {self.gamma}")


def iteration_weights(m: int, gamma: float) -> np.ndarray:
    """[gamma^(m-1), ..., gamma, 1.0] for m snapshots."""
    return gamma ** np.arange(m - 1, -1, -1, dtype=np.float64)


def window_loss(snapshots, gt: np.ndarray, mask: np.ndarray, cfg: LossConfig) -> Tensor:
    """Weighted mean L1 trajectory error over one window.

    `snapshots` is the list of (W, N, 2) position tensors from refinement,
    `gt` the matching ground truth, and `mask` a (W, N) validity weight
    (inactive or truncated entries contribute nothing).
    """
    if not snapshots:
        raise UsageError("window_loss needs at least one snapshot")
    gt = np.asarray(gt, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    if gt.shape != tuple(snapshots[0].shape):
        raise UsageError(f"gt shape {gt.shape} != snapshot shape {snapshots[0].shape}")
    if mask.shape != gt.shape[:2]:
        raise UsageError(f"mask shape {mask.shape} != {gt.shape[:2]}")
    denom = float(max(mask.sum(), 1.0))
    weights = iteration_weights(len(snapshots), cfg.gamma)
    total = None
    for w, snap in zip(weights, snapshots):
        term = ops.sum_(ops.abs_(snap - gt) * mask[..., None]) * (float(w) / denom)
        total = term if total is None else total + term
    return total


def lr_schedule(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warm-up to base_lr, then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 5e-4
    warmup_steps: int = 100
    weight_decay: float = 1e-4
    gamma: float = 0.8
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 1


def _gt_lookup(gt_by_id: dict[int, list]) -> dict[int, dict[int, tuple[float, float]]]:
    return {tid: {t: (x, y) for t, x, y in samples} for tid, samples in gt_by_id.items()}


def sequence_loss(model: TrackerModel, frames, events, queries, gt_by_id,
                  loss_cfg: LossConfig) -> tuple[Tensor, int]:
    """Accumulated window losses over one tracked sequence."""
    lookup = _gt_lookup(gt_by_id)
    _, session = run_offline(model, frames, events, queries, record_windows=True)
    total = None
    for run in session.window_runs:
        w_len, n = run.active.shape
        gt = np.zeros((w_len, n, 2), dtype=np.float32)
        mask = run.active.copy()
        for q, qid in enumerate(session.query_ids):
            per_t = lookup.get(qid, {})
            for i, t in enumerate(run.slice_times):
                hit = per_t.get(int(t))
                if hit is None:
                    mask[i, q] = 0.0
                else:
                    gt[i, q] = hit
        wl = window_loss(run.snapshots, gt, mask, loss_cfg)
        total = wl if total is None else total + wl
    if total is None:
        raise UsageError("sequence produced no refinement windows")
    return total, len(session.window_runs)


def save_checkpoint(model: TrackerModel, path: str, step: int) -> None:
    """Weights plus Adam moments and step count, in the weight-file container."""
    arrays = {name: p.data for name, p in model.store.items()}
    opt_step = 0
    for name in model.store.names():
        m, v = model.store.moments(name)
        arrays[f"opt.{name}.m"] = m
        arrays[f"opt.{name}.v"] = v
        opt_step = model.store.step_count(name)
    save_arrays(arrays, path, extra={"step": step, "opt_step": opt_step})


def load_checkpoint(model: TrackerModel, path: str) -> int:
    """Restore weights and optimizer state; returns the step to resume from."""
    arrays, meta = read_weight_file(path)
    opt_step = int(meta.get("opt_step", 0))
    for name, p in model.store.items():
        if name not in arrays:
            raise TrainingError(f"checkpoint {path} missing parameter {name!r}")
        p.data = arrays[name].copy()
        m = arrays.get(f"opt.{name}.m")
        v = arrays.get(f"opt.{name}.v")
        if m is not None and v is not None:
            model.store.load_state(name, m.copy(), v.copy(), opt_step)
    return int(meta.get("step", 0))


def train(model: TrackerModel, sequences: list, cfg: TrainConfig, out_dir: str,
          resume: str | None = None, stop_fn=None,
          weights_path: str | None = None) -> list[tuple[int, float, float]]:
    """Toy training loop over preloaded sequences.

    `sequences` entries are (frames, events, queries, gt_by_id) tuples. The
    sequence picked at each step is a pure function of (seed, step), so a
    resumed run replays the original schedule exactly. Writes
    checkpoint.bin, weights.bin, and loss_log.csv under out_dir; returns
    the (step, loss, lr) history.
    """
    if not sequences:
        raise UsageError("training needs at least one sequence")
    os.makedirs(out_dir, exist_ok=True)
    loss_cfg = LossConfig(gamma=cfg.gamma)
    start = 0
    history: list[tuple[int, float, float]] = []
    log_path = os.path.join(out_dir, "loss_log.csv")
    if resume:
        start = load_checkpoint(model, resume)
        mode = "a"
    else:
        mode = "w"

    with open(log_path, mode) as log:
        if mode == "w":
            log.write("step,loss,lr\n")
        for step in range(start, cfg.steps):
            pick = int(np.random.default_rng((cfg.seed, step)).integers(len(sequences)))
            frames, events, queries, gt_by_id = sequences[pick]
            lr = lr_schedule(step, cfg.lr, cfg.warmup_steps, cfg.steps)

            model.store.zero_grad()
            loss, _ = sequence_loss(model, frames, events, queries, gt_by_id, loss_cfg)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingError(f"non-finite loss at step {step}")
            backward(loss, params=model.store.tensors())
            adamw_step(model.store, lr=lr, weight_decay=cfg.weight_decay)

            history.append((step, loss_val, lr))
            if step % cfg.log_every == 0:
                log.write(f"{step},{loss_val:.6f},{lr:.8f}\n")
                log.flush()
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, os.path.join(out_dir, "checkpoint.bin"), step + 1)
            if stop_fn is not None and stop_fn(step, loss_val):
                break

    done = history[-1][0] + 1 if history else start
    save_checkpoint(model, os.path.join(out_dir, "checkpoint.bin"), done)
    save_weights(model.store, weights_path or os.path.join(out_dir, "weights.bin"),
                 extra={"step": done})
    return history
