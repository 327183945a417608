"""Training and test-time objectives over (B, C) probability batches."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import torch

from .errors import ConfigError

LSR_EPS = 0.1
LSR_LOG_CLAMP = 1e-12
EN_EPS = 1e-6


class ProbabilityClampWarning(UserWarning):
    pass


def _as_batch(probs: torch.Tensor) -> torch.Tensor:
    if probs.dim() == 1:
        probs = probs.unsqueeze(0)
    if probs.dim() != 2:
        raise ValueError(f"expected a (B, C) probability batch, got shape {tuple(probs.shape)}")
    return probs


def lsr_loss(probs: torch.Tensor, labels, eps: float = LSR_EPS) -> torch.Tensor:
    """Cross-entropy against one-hot targets smoothed toward uniform by ``eps``.

    ``log`` is taken of ``max(p, 1e-12)``; a warning is emitted when the clamp
    is active since every class carries positive target weight.
    """
    probs = _as_batch(probs)
    B, C = probs.shape
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != (B,):
        raise ValueError(f"labels shape {tuple(labels.shape)} does not match batch size {B}")
    if torch.any(labels < 0) or torch.any(labels >= C):
        raise ValueError(f"labels must lie in 0..{C - 1}")
    target = torch.full_like(probs, eps / C)
    target[torch.arange(B), labels] += 1.0 - eps
    if torch.any(probs.detach() < LSR_LOG_CLAMP):
        warnings.warn("probabilities below 1e-12 clamped in label-smoothed loss",
                      ProbabilityClampWarning)
    logp = torch.log(torch.clamp(probs, min=LSR_LOG_CLAMP))
    return -(target * logp).sum(dim=1).mean()


def nm_loss(probs: torch.Tensor) -> torch.Tensor:
    """Negative Frobenius norm of the batch matrix, scaled by 1/(B*C)."""
    probs = _as_batch(probs)
    B, C = probs.shape
    return -torch.sqrt((probs * probs).sum()) / (B * C)


def en_loss(probs: torch.Tensor, eps: float = EN_EPS) -> torch.Tensor:
    """Mean Shannon entropy per row with ``log(p + eps)``."""
    probs = _as_batch(probs)
    return -(probs * torch.log(probs + eps)).sum(dim=1).mean()


def gen_loss(probs: torch.Tensor, q: float) -> torch.Tensor:
    """Mean generalised (Tsallis) entropy ``(1 - sum p^q) / (q - 1)``."""
    if q == 1:
        raise ValueError("generalised entropy is undefined at q = 1")
    probs = _as_batch(probs)
    return ((1.0 - (probs ** q).sum(dim=1)) / (q - 1.0)).mean()


@dataclass(frozen=True)
class TTDAConfig:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.5
    q: float = 1.1
    lr: float = 1e-3
    lam: float = 10.0
    eta: int = 40
    epochs: int = 10
    batch_size: int = 32
    update_scope: str = "all"
    train_mode: bool = False

    def __post_init__(self):
        if self.q == 1:
            raise ConfigError("q = 1 is a pole of the generalised entropy")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.alpha == self.beta == self.gamma == 0:
            raise ConfigError("at least one of alpha, beta, gamma must be positive")
        if self.update_scope not in ("all", "norm_only"):
            raise ConfigError(f"update_scope must be all|norm_only, got {self.update_scope!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def ttda_objective(probs: torch.Tensor, cfg: TTDAConfig) -> torch.Tensor:
    """Weighted sum ``alpha * NM + beta * EN + gamma * GEN``; zero-weight terms are skipped."""
    total = probs.new_zeros(())
    if cfg.alpha:
        total = total + cfg.alpha * nm_loss(probs)
    if cfg.beta:
        total = total + cfg.beta * en_loss(probs)
    if cfg.gamma:
        total = total + cfg.gamma * gen_loss(probs, cfg.q)
    return total
