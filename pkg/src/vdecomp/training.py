"""Supervised training of the inference network and test-time adaptation.

Training minimizes ``fid + sup + rank + sparse + tau*orth`` with the leaf
posteriors recomputed in closed form (and detached) on every batch.
Adaptation uses only unsupervised terms on unlabeled images and updates a
chosen subset of the three sub-networks.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .distributions import Hyperparams
from .errors import InvalidPosteriorError, TrainingDivergedError
from .losses import LossBreakdown, Task
from .network import DecompositionResult, Model, decompose, run_model
from .tasks import TaskDataset

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "fid", "rank", "sparse", "orth", "sup", "total")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-4
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 20
    task: Task | str = Task.DEN
    seed: int = 0
    max_steps: int | None = None  # optional hard cap on optimizer steps
    num_samples: int = 1

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr_decay_every", "num_samples"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not self.lr >= 0:
            raise ValueError(f"lr must be nonnegative, got {self.lr}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if self.max_steps is not None and (not isinstance(self.max_steps, int) or self.max_steps < 0):
            raise ValueError(f"max_steps must be a nonnegative integer, got {self.max_steps!r}")
        object.__setattr__(self, "task", Task(self.task))


class AdaptMode(str, enum.Enum):
    S = "S"
    L = "L"
    LS = "LS"


# loss terms and trainable sub-networks per mode
_MODE_TERMS = {AdaptMode.S: ("fid", "sparse"), AdaptMode.L: ("fid", "rank"), AdaptMode.LS: ("fid", "rank", "sparse")}
_MODE_NETS = {AdaptMode.S: ("net_S",), AdaptMode.L: ("net_A", "net_B"), AdaptMode.LS: ("net_A", "net_B", "net_S")}


@dataclass(frozen=True)
class AdaptConfig:
    mode: AdaptMode | str = AdaptMode.S
    lr: float = 1e-6
    batch_size: int = 1
    max_steps: int = 20
    patience: int | float = 2
    seed: int = 0
    num_samples: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mode", AdaptMode(self.mode))
        if not self.lr >= 0:
            raise ValueError(f"lr must be nonnegative, got {self.lr}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ValueError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if not isinstance(self.max_steps, int) or self.max_steps < 0:
            raise ValueError(f"max_steps must be a nonnegative integer, got {self.max_steps!r}")
        if not self.patience >= 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not isinstance(self.num_samples, int) or self.num_samples < 1:
            raise ValueError(f"num_samples must be a positive integer, got {self.num_samples!r}")


def _tensor(x, dtype):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _target(dataset: TaskDataset, idx, task: Task, dtype):
    if task is Task.DEN:
        return _tensor(dataset.U[idx], dtype)
    if dataset.U_A is None:
        raise ValueError("UAD training needs U_A targets in the dataset")
    return _tensor(dataset.U[idx], dtype), _tensor(dataset.U_A[idx], dtype)


def _step_seed(base: int, step: int) -> int:
    return int(np.random.SeedSequence([base & 0xFFFFFFFF, step]).generate_state(1)[0])


def _mean_breakdown(rows: list[dict]) -> dict:
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def _check_finite(losses: LossBreakdown, where: str):
    values = losses.to_dict()
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingDivergedError(f"non-finite loss at {where}", values)


def train(model: Model, dataset: TaskDataset, cfg: TrainConfig, hyper: Hyperparams | None = None, log_every: int = 0):
    """Train ``model`` in place; returns ``(model, history)``.

    ``history`` holds one dict per epoch: ``epoch`` plus the mean of each
    :class:`LossBreakdown` field over the epoch's batches.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    hyper = hyper or Hyperparams(r0=model.config.r0)
    dtype = next(model.parameters()).dtype
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_decay_every, gamma=cfg.lr_decay_factor)
    history: list[dict] = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
        order = rng.permutation(len(dataset))
        rows = []
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            idx = np.sort(order[start : start + cfg.batch_size])
            Y = _tensor(dataset.Y[idx], dtype)
            try:
                result = run_model(
                    model, Y, hyper, seed=_step_seed(cfg.seed, step), task=cfg.task,
                    target=_target(dataset, idx, cfg.task, dtype), num_samples=cfg.num_samples,
                )
            except InvalidPosteriorError as exc:
                last = rows[-1] if rows else (history[-1] if history else {})
                raise TrainingDivergedError(
                    f"non-finite network output at epoch {epoch}, step {step}: {exc}",
                    {"epoch": epoch, "step": step, "last_losses": last},
                ) from exc
            _check_finite(result.losses, f"epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            if cfg.lr > 0:
                result.losses.total.backward()
                opt.step()
            rows.append(result.losses.to_dict())
            step += 1
            if log_every and step % log_every == 0:
                log.info("step %d total %.4g", step, rows[-1]["total"])
        if cfg.lr > 0:
            sched.step()
        if rows:
            history.append({"epoch": epoch, **_mean_breakdown(rows)})
    return model, history


def write_history_csv(history: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(float(v)) if k != "epoch" else int(v)) for k, v in row.items() if k in HISTORY_COLUMNS})


def adapt_objective(losses: LossBreakdown, mode: AdaptMode):
    terms = _MODE_TERMS[AdaptMode(mode)]
    return sum(getattr(losses, t) for t in terms)


def adapt(model: Model, ood_images, cfg: AdaptConfig, hyper: Hyperparams | None = None):
    """Unsupervised test-time adaptation, in place; returns ``(model, history)``.

    One step is a pass over ``ood_images`` in batches of ``cfg.batch_size``,
    each batch giving one optimizer update.  Stops after ``cfg.max_steps``
    passes or when the pass-mean objective has not improved for
    ``cfg.patience`` consecutive passes.  Sub-networks outside the mode get
    no gradient and stay bitwise unchanged.  ``history`` lists per-pass
    means of the objective and each loss term.
    """
    images = np.asarray(ood_images.detach().cpu() if isinstance(ood_images, torch.Tensor) else ood_images)
    if images.ndim == 2:
        images = images[None, None]
    elif images.ndim == 3:
        images = images[None]
    if len(images) == 0:
        raise ValueError("adaptation set is empty")
    if cfg.max_steps == 0:
        return model, []
    hyper = hyper or Hyperparams(r0=model.config.r0)
    dtype = next(model.parameters()).dtype
    trainable = set(_MODE_NETS[cfg.mode])
    params = []
    saved_flags = {}
    for name in ("net_A", "net_B", "net_S"):
        for p in getattr(model, name).parameters():
            saved_flags[p] = p.requires_grad
            p.requires_grad_(name in trainable)
            if name in trainable:
                params.append(p)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    was_training = model.training
    # eval mode keeps normalization buffers (batch-norm variant) untouched
    model.eval()
    history = []
    best, stale, update = math.inf, 0, 0
    try:
        for step in range(cfg.max_steps):
            rows = []
            for start in range(0, len(images), cfg.batch_size):
                Y = _tensor(images[start : start + cfg.batch_size], dtype)
                result = run_model(model, Y, hyper, seed=_step_seed(cfg.seed, update), num_samples=cfg.num_samples)
                _check_finite(result.losses, f"adapt step {step}")
                objective = adapt_objective(result.losses, cfg.mode)
                opt.zero_grad(set_to_none=True)
                if cfg.lr > 0:
                    objective.backward()
                    opt.step()
                rows.append({"objective": float(objective.detach()), **result.losses.to_dict()})
                update += 1
            row = {"step": step, **_mean_breakdown(rows)}
            history.append(row)
            if row["objective"] < best:
                best, stale = row["objective"], 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    finally:
        for p, flag in saved_flags.items():
            p.requires_grad_(flag)
        model.train(was_training)
    return model, history


def adapt_online(model: Model, Y, cfg: AdaptConfig, hyper: Hyperparams | None = None, seed: int = 0):
    """Adapt a clone on the single image ``Y``, then decompose it with the clone.

    Returns ``(DecompositionResult, adapted_model)``; ``model`` is not touched.
    """
    Y = torch.as_tensor(Y)
    if Y.ndim == 4:
        if Y.shape[0] != 1:
            raise ValueError("adapt_online takes a single image")
        Y = Y[0]
    clone = model.clone()
    clone, history = adapt(clone, Y, cfg, hyper)
    result = decompose(clone, Y.to(next(clone.parameters()).dtype), seed=seed, hyper=hyper)
    result.history = history
    return result, clone


def evaluate(model: Model, images, hyper: Hyperparams | None = None, seed: int = 0, batch_size: int = 64) -> list[DecompositionResult]:
    """Per-image decompositions (image ``i`` uses seed ``seed + i``)."""
    images = np.asarray(images)
    dtype = next(model.parameters()).dtype
    return [decompose(model, _tensor(images[i], dtype), seed=seed + i, hyper=hyper) for i in range(len(images))]


def breakdown_fields() -> tuple[str, ...]:
    return tuple(f.name for f in fields(LossBreakdown))
