"""Test-time adaptation (TTDA), test-time augmentation refinements, agreement rate.

Refinements take *predictors*: callables mapping a list of clips to a (B, C)
array of class probabilities. :func:`model_predictor` wraps a network; tests
plug in stubs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .audio_io import AudioClip
from .augment import MAX_SHIFT_FRAC, recipe_specs, sample_rng, time_shift
from .errors import ConfigError, EnsembleError
from .losses import TTDAConfig, ttda_objective
from .model import AMAuT, featurize, to_tensor
from .numerics import NesterovSGD, ScheduleParams, lr_schedule
from .training import VIEW_STREAM, _batches, accumulate_views, predict_proba

logger = logging.getLogger(__name__)

Predictor = Callable[[Sequence[AudioClip]], np.ndarray]

TTDA_STREAM = 2
TTDA_VIEW_STREAM = 3


# ---------------------------------------------------------------------------
# TTDA


@dataclass
class TTDATrace:
    records: list[tuple[int, int, float]] = field(default_factory=list)  # (epoch, batch, loss)
    diverged: bool = False
    diagnostic: str = ""

    def epoch_means(self) -> list[float]:
        out: dict[int, list[float]] = {}
        for e, _, loss in self.records:
            out.setdefault(e, []).append(loss)
        return [float(np.mean(out[e])) for e in sorted(out)]

    def __len__(self):
        return len(self.records)


def _is_norm(module: nn.Module) -> bool:
    return isinstance(module, (nn.BatchNorm1d, nn.LayerNorm))


def adaptable_parameters(model: nn.Module, scope: str) -> list[nn.Parameter]:
    if scope == "all":
        return list(model.parameters())
    if scope == "norm_only":
        return [p for m in model.modules() if _is_norm(m) for p in m.parameters(recurse=False)]
    raise ConfigError(f"unknown update scope {scope!r}")


def ttda_adapt(model: AMAuT, clips: Sequence[AudioClip], cfg: TTDAConfig, *,
               seed: int = 0) -> tuple[AMAuT, TTDATrace]:
    """Unsupervised adaptation on unlabeled clips; mutates and returns ``model``.

    Every batch is expanded into the two time-shift views; the weighted
    NM/EN/GEN objective of each view is summed before a single SGD step.
    Optimiser velocities start from zero. Stops early when the batch loss
    turns non-finite or exceeds ten times the magnitude of the first one.
    """
    trace = TTDATrace()
    if cfg.epochs == 0 or not clips:
        return model, trace
    if len(clips) < 2 and cfg.train_mode:
        raise ConfigError("TTDA in training mode needs at least two clips")
    params = adaptable_parameters(model, cfg.update_scope)
    for p in model.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    opt = NesterovSGD(params, lr=cfg.lr)
    sched = ScheduleParams(cfg.lr, cfg.lam, cfg.eta)
    specs = recipe_specs("ttda2")
    torch.manual_seed(seed)
    first: Optional[float] = None
    try:
        for epoch in range(cfg.epochs):
            opt.set_lr(lr_schedule(sched, epoch))
            rng = np.random.default_rng([seed, TTDA_STREAM, epoch])
            for b, idx in enumerate(_batches(len(clips), cfg.batch_size, rng)):
                batch = [clips[i] for i in idx]
                views = [[spec.apply(c, sample_rng(seed, epoch, int(i), TTDA_VIEW_STREAM))
                          for spec in specs] for c, i in zip(batch, idx)]
                inputs = [to_tensor(featurize(list(v), model.mel), model) for v in zip(*views)]
                model.train(cfg.train_mode)
                opt.zero_grad(set_to_none=True)
                rep = accumulate_views(model, inputs, lambda p: ttda_objective(p, cfg))
                if rep.skipped or not math.isfinite(rep.total):
                    trace.diverged = True
                    trace.diagnostic = f"non-finite TTDA loss at epoch {epoch}, batch {b}"
                    return model, trace
                if first is None:
                    first = rep.total
                elif abs(rep.total) > 10.0 * max(abs(first), 1e-6):
                    trace.diverged = True
                    trace.diagnostic = (f"TTDA loss {rep.total:.4g} exceeded 10x the initial "
                                        f"{first:.4g} at epoch {epoch}, batch {b}")
                    trace.records.append((epoch, b, rep.total))
                    return model, trace
                opt.step()
                trace.records.append((epoch, b, rep.total))
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
        model.eval()
    if trace.diverged:
        logger.warning(trace.diagnostic)
    return model, trace


# ---------------------------------------------------------------------------
# TTAu refinements


def model_predictor(model: AMAuT, batch_size: int = 64) -> Predictor:
    def predict(clips: Sequence[AudioClip]) -> np.ndarray:
        return predict_proba(model, list(clips), batch_size)
    predict.n_classes = model.cfg.n_classes
    return predict


def shift_views(clips: Sequence[AudioClip], A: int, rng: np.random.Generator,
                max_shift_frac: float = MAX_SHIFT_FRAC) -> list[list[AudioClip]]:
    """``A`` weak views per clip, alternating right and left shifts of U(0, max) each."""
    if A < 0 or A % 2:
        raise ConfigError(f"A must be a non-negative even number, got {A}")
    views = []
    for i in range(A):
        direction = "right" if i % 2 == 0 else "left"
        views.append([time_shift(c, float(rng.uniform(0.0, max_shift_frac)), direction)
                      for c in clips])
    return views


def _aug_mean(predict: Predictor, clips: Sequence[AudioClip],
              views: Sequence[Sequence[AudioClip]]) -> np.ndarray:
    total = np.asarray(predict(clips), dtype=np.float64)
    for v in views:
        total = total + np.asarray(predict(v), dtype=np.float64)
    return total / (len(views) + 1)


def aug_refine(predict: Predictor, clips: Sequence[AudioClip], A: int = 2, *,
               rng: Optional[np.random.Generator] = None,
               max_shift_frac: float = MAX_SHIFT_FRAC) -> np.ndarray:
    """Average of the prediction on each clip and on ``A`` shifted copies."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return _aug_mean(predict, clips, shift_views(clips, A, rng, max_shift_frac))


def _check_members(predictors: Sequence[Predictor], require_odd: bool) -> None:
    M = len(predictors)
    if M == 0:
        raise EnsembleError("no ensemble members given")
    if require_odd and M % 2 == 0:
        raise EnsembleError(f"ensemble size must be odd, got M={M}")


def _check_outputs(outs: Sequence[np.ndarray]) -> None:
    widths = {o.shape[-1] for o in outs}
    if len(widths) > 1:
        raise EnsembleError(f"ensemble members disagree on class count: {sorted(widths)}")


def mlt_refine(predictors: Sequence[Predictor], clips: Sequence[AudioClip], *,
               require_odd: bool = True) -> np.ndarray:
    """Mean prediction over independently trained members."""
    _check_members(predictors, require_odd)
    outs = [np.asarray(p(clips), dtype=np.float64) for p in predictors]
    _check_outputs(outs)
    total = outs[0]
    for o in outs[1:]:
        total = total + o
    return total / len(outs)


def hyb_refine(predictors: Sequence[Predictor], clips: Sequence[AudioClip], A: int = 2, *,
               rng: Optional[np.random.Generator] = None,
               max_shift_frac: float = MAX_SHIFT_FRAC,
               require_odd: bool = True) -> np.ndarray:
    """Mean over members of each member's augmentation-averaged prediction.

    All members see the same shifted views.
    """
    _check_members(predictors, require_odd)
    rng = rng if rng is not None else np.random.default_rng(0)
    views = shift_views(clips, A, rng, max_shift_frac)
    outs = [_aug_mean(p, clips, views) for p in predictors]
    _check_outputs(outs)
    total = outs[0]
    for o in outs[1:]:
        total = total + o
    return total / len(outs)


# ---------------------------------------------------------------------------
# consistency


def confusion_matrix(pred1, pred2, n_classes: int) -> np.ndarray:
    """C x C counts with rows indexed by ``pred1`` and columns by ``pred2``."""
    a = np.asarray(pred1, dtype=np.int64)
    b = np.asarray(pred2, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"prediction vectors differ in shape: {a.shape} vs {b.shape}")
    if a.size and (min(a.min(), b.min()) < 0 or max(a.max(), b.max()) >= n_classes):
        raise ValueError(f"predictions must lie in 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (a, b), 1)
    return cm


def agreement_rate(pred1, pred2, n_classes: int) -> float:
    """Trace of the confusion matrix over its total."""
    cm = confusion_matrix(pred1, pred2, n_classes)
    total = cm.sum()
    if total == 0:
        raise ValueError("agreement rate of empty prediction vectors is undefined")
    return float(np.trace(cm) / total)
