"""Multiview supervised training.

Each sample contributes one loss per augmented view; the view losses are
summed and a single optimiser step is taken on the accumulated gradient.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .audio_io import AudioClip
from .augment import recipe_specs, sample_rng
from .errors import ConfigError, DivergenceError, NonFiniteGradientError
from .losses import lsr_loss
from .model import AMAuT, featurize, to_tensor
from .numerics import NesterovSGD, ScheduleParams, lr_schedule, softmax

logger = logging.getLogger(__name__)

SHUFFLE_STREAM = 1
VIEW_STREAM = 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr0: float = 1e-3
    lam: float = 10.0
    eta: int = 40
    recipe: str = "train4"
    seed: int = 0
    weight_decay: float = 1e-3
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 2:
            # batch-norm needs at least two samples per training batch
            raise ConfigError("batch_size must be >= 2")
        ScheduleParams(self.lr0, self.lam, self.eta)

    @property
    def schedule(self) -> ScheduleParams:
        return ScheduleParams(self.lr0, self.lam, self.eta)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepReport:
    total: float
    per_view: list[float]
    skipped: bool = False


def accumulate_views(model: AMAuT, view_inputs: Sequence[torch.Tensor],
                     loss_fn: Callable[[torch.Tensor], torch.Tensor]) -> StepReport:
    """Forward/backward each view in order, accumulating gradients in ``.grad``.

    ``loss_fn`` maps a (B, C) probability batch to a scalar. Gradients are not
    zeroed here. If any view loss is non-finite all gradients are cleared and
    the report is marked skipped.
    """
    per_view = []
    for x in view_inputs:
        loss = loss_fn(softmax(model(x), dim=-1))
        value = loss.item()
        if not math.isfinite(value):
            for p in model.parameters():
                p.grad = None
            return StepReport(float("nan"), per_view + [value], skipped=True)
        loss.backward()
        per_view.append(value)
    total = 0.0
    for v in per_view:
        total += v
    return StepReport(total, per_view)


def build_views(clips: Sequence[AudioClip], specs, seed: int, epoch: int,
                indices: Sequence[int]) -> list[list[AudioClip]]:
    """Views grouped by augmentation: result[k][b] is view k of sample b."""
    per_sample = []
    for clip, idx in zip(clips, indices):
        rng = sample_rng(seed, epoch, int(idx), VIEW_STREAM)
        per_sample.append([spec.apply(clip, rng) for spec in specs])
    return [list(v) for v in zip(*per_sample)]


def multiview_step(model: AMAuT, clips: Sequence[AudioClip], labels: Sequence[int],
                   optimizer: torch.optim.Optimizer, *, recipe: str = "train4",
                   noise_bank: Sequence[AudioClip] = (), seed: int = 0, epoch: int = 0,
                   indices: Optional[Sequence[int]] = None, specs=None) -> StepReport:
    """One update on a batch: sum of label-smoothed losses over all views, then step."""
    if specs is None:
        specs = recipe_specs(recipe, noise_bank)
    if indices is None:
        indices = range(len(clips))
    views = build_views(clips, specs, seed, epoch, indices)
    model.train()
    optimizer.zero_grad(set_to_none=True)
    inputs = [to_tensor(featurize(v, model.mel), model) for v in views]
    report = accumulate_views(model, inputs, lambda p: lsr_loss(p, labels))
    if report.skipped:
        logger.warning("non-finite view loss at epoch %d (samples %s); step skipped",
                       epoch, list(indices))
        return report
    optimizer.step()
    return report


def predict_proba(model: AMAuT, clips: Sequence[AudioClip], batch_size: int = 64) -> np.ndarray:
    """Eval-mode softmax outputs as a float64 (N, C) array."""
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(clips), batch_size):
            x = to_tensor(featurize(clips[i:i + batch_size], model.mel), model)
            out.append(softmax(model(x), dim=-1).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.cfg.n_classes))


def accuracy(model: AMAuT, clips: Sequence[AudioClip], labels: Sequence[int],
             batch_size: int = 64) -> float:
    if not clips:
        return float("nan")
    pred = predict_proba(model, clips, batch_size).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_accuracy: Optional[float]
    skipped_steps: int = 0


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_state: Optional[dict] = None
    best_epoch: int = -1
    best_accuracy: float = float("-inf")


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        # a singleton batch cannot feed batch-norm in training mode
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def train(model: AMAuT, clips: Sequence[AudioClip], labels: Sequence[int], cfg: TrainConfig,
          *, noise_bank: Sequence[AudioClip] = (), val_clips: Sequence[AudioClip] = (),
          val_labels: Sequence[int] = (),
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Epoch loop of multiview steps with per-epoch validation on clean clips.

    The state with the best validation accuracy (or the last state, without a
    validation split) is kept in ``result.best_state``.
    """
    if len(clips) < 2:
        raise ConfigError("training needs at least two clips")
    labels = np.asarray(labels)
    specs = recipe_specs(cfg.recipe, noise_bank)
    torch.manual_seed(cfg.seed)
    opt = NesterovSGD(model.parameters(), lr=cfg.lr0, momentum=cfg.momentum,
                      weight_decay=cfg.weight_decay)
    result = TrainResult(best_state=copy.deepcopy(model.state_dict()))
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.schedule, epoch)
        opt.set_lr(lr)
        rng = np.random.default_rng([cfg.seed, SHUFFLE_STREAM, epoch])
        losses, skipped = [], 0
        for idx in _batches(len(clips), cfg.batch_size, rng):
            try:
                rep = multiview_step(model, [clips[i] for i in idx], labels[idx], opt,
                                     specs=specs, seed=cfg.seed, epoch=epoch, indices=idx)
            except NonFiniteGradientError:
                opt.zero_grad(set_to_none=True)
                skipped += 1
                continue
            if rep.skipped:
                skipped += 1
                continue
            losses.append(rep.total)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        if not losses:
            raise DivergenceError(f"every step of epoch {epoch} produced non-finite values")
        val_acc = accuracy(model, val_clips, val_labels) if len(val_clips) else None
        rec = EpochRecord(epoch, lr, train_loss, val_acc, skipped)
        result.history.append(rec)
        if val_acc is None or val_acc > result.best_accuracy:
            if val_acc is not None:
                result.best_accuracy = val_acc
            result.best_state = copy.deepcopy(model.state_dict())
            result.best_epoch = epoch
        if on_epoch is not None:
            on_epoch(rec)
        logger.info("epoch %d lr %.3g loss %.4f val %s", epoch, lr, train_loss, val_acc)
    return result
