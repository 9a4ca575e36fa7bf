"""Multi-objective training loop with a two-group step-decay schedule.

Backbone parameters (trunk and branches) and newly attached parameters
(reduction heads and classifiers) form separate optimizer groups; the new
parameters train at a multiple of the backbone rate. Batch-norm scales and
shifts and all biases are exempt from weight decay.
"""

from __future__ import annotations

import csv
from bisect import bisect_right
from dataclasses import asdict, dataclass
from pathlib import Path
from time import perf_counter

import numpy as np
import torch

from .data import AugmentConfig, Dataset, augment, standardize
from .model import EnsembleNet, save_checkpoint, softmax_log_loss

_EPOCH_SEED_TAG = 101


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 32
    base_lr: float = 0.01
    decay_epochs: tuple[int, ...] = (40, 60)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    new_param_lr_multiplier: float = 10.0
    loss_reduction: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.decay_factor <= 0:
            raise ValueError(f"decay_factor must be positive, got {self.decay_factor}")
        if any(not 1 <= d < self.epochs for d in self.decay_epochs):
            raise ValueError(f"decay epochs must lie in [1, epochs), got {self.decay_epochs} "
                             f"with epochs={self.epochs}")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ValueError(f"decay epochs must be strictly increasing, got {self.decay_epochs}")
        if self.momentum < 0:
            raise ValueError(f"momentum must be >= 0, got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.new_param_lr_multiplier <= 0:
            raise ValueError(
                f"new_param_lr_multiplier must be positive, got {self.new_param_lr_multiplier}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError(f"loss_reduction must be 'mean' or 'sum', got {self.loss_reduction!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "decay_epochs" in d:
            d["decay_epochs"] = tuple(d["decay_epochs"])
        return cls(**d)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    backbone_lr: float
    new_param_lr: float
    total_loss: float
    objective_losses: tuple[float, ...]
    wall_time_s: float


@dataclass
class TrainLog:
    """Per-epoch records; loss values are per-sample means per objective."""

    records: list[EpochRecord]

    def to_csv(self, path) -> None:
        if not self.records:
            raise ValueError("cannot serialize an empty training log")
        n_obj = len(self.records[0].objective_losses)
        header = (["epoch", "lr", "new_param_lr", "total_loss"]
                  + [f"objective_{i}" for i in range(n_obj)] + ["wall_time_s"])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for r in self.records:
                writer.writerow([r.epoch, repr(r.backbone_lr), repr(r.new_param_lr),
                                 repr(r.total_loss)]
                                + [repr(v) for v in r.objective_losses]
                                + [repr(r.wall_time_s)])

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:4] != ["epoch", "lr", "new_param_lr", "total_loss"]:
                raise ValueError(f"{path} is not a training log (bad header {header})")
            n_obj = len(header) - 5
            records = []
            for row in reader:
                if len(row) != len(header):
                    raise ValueError(f"{path}: row has {len(row)} fields, expected {len(header)}")
                records.append(EpochRecord(
                    epoch=int(row[0]),
                    backbone_lr=float(row[1]),
                    new_param_lr=float(row[2]),
                    total_loss=float(row[3]),
                    objective_losses=tuple(float(v) for v in row[4:4 + n_obj]),
                    wall_time_s=float(row[-1]),
                ))
        return cls(records)


def lr_schedule(epoch: int, cfg: TrainConfig) -> tuple[float, float]:
    """(backbone rate, new-parameter rate) in effect during the given epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside schedule range [0, {cfg.epochs})")
    steps = bisect_right(cfg.decay_epochs, epoch)
    rate = cfg.base_lr * cfg.decay_factor ** steps
    return rate, rate * cfg.new_param_lr_multiplier


def param_groups(model: EnsembleNet, cfg: TrainConfig) -> list[dict]:
    """Four optimizer groups: {backbone, new} x {decayed, undecayed}.

    Backbone means trunk plus branch stages; everything in the reduction and
    classifier heads is "new". One-dimensional tensors (batch-norm scales and
    shifts, every bias) go to the undecayed groups.
    """
    buckets: dict[tuple[str, bool], list] = {}
    for name, p in model.named_parameters():
        kind = "backbone" if name.startswith(("stem.", "stage", "branches.")) else "new"
        decayed = p.ndim >= 2
        buckets.setdefault((kind, decayed), []).append(p)
    lr_backbone, lr_new = lr_schedule(0, cfg)
    groups = []
    for (kind, decayed), params in buckets.items():
        groups.append({
            "params": params,
            "kind": kind,
            "lr": lr_backbone if kind == "backbone" else lr_new,
            "weight_decay": cfg.weight_decay if decayed else 0.0,
        })
    return groups


def total_loss(objective_losses, expected_count: int | None = None):
    """Unweighted sum of the per-objective losses."""
    losses = list(objective_losses)
    if not losses:
        raise ValueError("no objective losses given")
    if expected_count is not None and len(losses) != expected_count:
        raise ValueError(f"expected {expected_count} objective losses, got {len(losses)}")
    return sum(losses)


def _batch_slices(n: int, batch_size: int) -> list[slice]:
    slices = [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]
    # A trailing singleton would break train-mode batch norm; fold it into the
    # previous batch instead of dropping the sample.
    if len(slices) > 1 and slices[-1].stop - slices[-1].start == 1:
        last = slices.pop()
        prev = slices.pop()
        slices.append(slice(prev.start, last.stop))
    return slices


def _epoch_rng(cfg: TrainConfig, epoch: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, _EPOCH_SEED_TAG, epoch])


def make_batch(samples, augment_cfg: AugmentConfig,
               rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Augment, standardize and stack samples into (B, 3, H, W) + labels."""
    imgs = np.stack([standardize(augment(s, augment_cfg, rng), augment_cfg) for s in samples])
    x = torch.from_numpy(imgs).permute(0, 3, 1, 2).contiguous()
    y = torch.tensor([s.person_id for s in samples], dtype=torch.long)
    return x, y


def train(model: EnsembleNet, dataset: Dataset, train_cfg: TrainConfig,
          augment_cfg: AugmentConfig,
          out_dir=None) -> tuple[EnsembleNet, TrainLog, list[Path]]:
    """Run the full schedule over the train split.

    Checkpoints are written into ``out_dir`` (if given) whenever the next
    epoch starts a new learning-rate step and after the final epoch. Returns
    the trained model, the per-epoch log, and the checkpoint paths. Batches
    follow a fresh seeded permutation per epoch; the last incomplete batch is
    kept. A non-finite objective aborts with the objective index named.
    """
    if not dataset.train:
        raise ValueError("dataset has no training samples")
    if dataset.num_train_classes != model.config.num_classes:
        raise ValueError(f"model expects {model.config.num_classes} classes but the dataset "
                         f"has {dataset.num_train_classes}")
    if tuple(augment_cfg.target_size) != tuple(model.config.input_size):
        raise ValueError(f"augment target size {augment_cfg.target_size} does not match "
                         f"model input size {model.config.input_size}")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    optimizer = torch.optim.SGD(param_groups(model, train_cfg),
                                lr=train_cfg.base_lr, momentum=train_cfg.momentum)
    n = len(dataset.train)
    n_objectives = model.num_parts
    records: list[EpochRecord] = []
    checkpoints: list[Path] = []

    for epoch in range(train_cfg.epochs):
        start = perf_counter()
        lr_backbone, lr_new = lr_schedule(epoch, train_cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr_backbone if group["kind"] == "backbone" else lr_new

        rng = _epoch_rng(train_cfg, epoch)
        order = rng.permutation(n)
        model.train()
        objective_sums = np.zeros(n_objectives)

        for step, sl in enumerate(_batch_slices(n, train_cfg.batch_size)):
            samples = [dataset.train[i] for i in order[sl]]
            x, y = make_batch(samples, augment_cfg, rng)
            _, logits = model(x)
            losses = [softmax_log_loss(lg, y, reduction=train_cfg.loss_reduction)
                      for lg in logits]
            for i, value in enumerate(losses):
                if not torch.isfinite(value):
                    raise RuntimeError(
                        f"non-finite loss for objective {i} at epoch {epoch} step {step}")
            batch_loss = total_loss(losses, expected_count=n_objectives)
            optimizer.zero_grad()
            batch_loss.backward()
            optimizer.step()
            scale = len(samples) if train_cfg.loss_reduction == "mean" else 1
            objective_sums += [float(v.detach()) * scale for v in losses]

        means = objective_sums / n
        records.append(EpochRecord(
            epoch=epoch,
            backbone_lr=lr_backbone,
            new_param_lr=lr_new,
            total_loss=float(means.sum()),
            objective_losses=tuple(float(v) for v in means),
            wall_time_s=perf_counter() - start,
        ))
        if out_dir is not None and (epoch + 1 in train_cfg.decay_epochs
                                    or epoch == train_cfg.epochs - 1):
            path = out_dir / f"checkpoint_epoch_{epoch + 1:03d}.npz"
            save_checkpoint(model, path)
            checkpoints.append(path)

    return model, TrainLog(records), checkpoints
