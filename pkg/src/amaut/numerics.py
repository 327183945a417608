"""Differentiable primitives, optimiser, learning-rate schedule, gradient checker.

Autodiff itself comes from torch. What lives here is the inventory of
primitives the model is built from, a finite-difference checker that is
independent of autograd, and the Nesterov SGD update and decay schedule used
for both training and test-time adaptation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, NonFiniteGradientError, ShapeError

BN_MOMENTUM = 0.1
GELU_APPROX = "none"


# ---------------------------------------------------------------------------
# primitives


def _check_shape(cond: bool, what: str, *tensors: torch.Tensor) -> None:
    if not cond:
        shapes = ", ".join(str(tuple(t.shape)) for t in tensors)
        raise ShapeError(f"{what}: incompatible operand shapes {shapes}")


def conv1d(x, weight, bias=None, stride=1, padding=0):
    """x: (B, C_in, L); weight: (C_out, C_in, k). ``padding`` may be an int or (left, right)."""
    _check_shape(x.dim() == 3 and weight.dim() == 3 and x.shape[1] == weight.shape[1],
                 "conv1d", x, weight)
    if isinstance(padding, tuple):
        if padding != (0, 0):
            x = F.pad(x, padding)
        padding = 0
    _check_shape(x.shape[2] >= weight.shape[2], "conv1d (input shorter than kernel)", x, weight)
    return F.conv1d(x, weight, bias, stride=stride, padding=padding)


def conv_out_len(length: int, kernel: int, stride: int = 1, pad_total: int = 0) -> int:
    return (length + pad_total - kernel) // stride + 1


def same_padding(kernel: int) -> tuple[int, int]:
    total = kernel - 1
    return total // 2, total - total // 2


def max_pool1d(x, size: int, stride: Optional[int] = None):
    _check_shape(x.dim() == 3 and x.shape[2] >= size, "max_pool1d", x)
    return F.max_pool1d(x, size, stride or size)


def batch_norm1d(x, running_mean, running_var, weight, bias, training: bool,
                 momentum: float = BN_MOMENTUM, eps: float = 1e-5):
    return F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, eps)


def relu(x):
    return torch.relu(x)


def gelu(x):
    return F.gelu(x, approximate=GELU_APPROX)


def linear(x, weight, bias=None):
    _check_shape(x.shape[-1] == weight.shape[-1], "linear", x, weight)
    return F.linear(x, weight, bias)


def layer_norm(x, weight, bias, eps: float = 1e-5):
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def softmax(x, dim: int = -1):
    return torch.softmax(x, dim=dim)


def dropout(x, p: float, training: bool, generator: Optional[torch.Generator] = None):
    """Inverted dropout; identity when ``p == 0`` or not training."""
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


def mean_pool(x, dim: int = 1):
    return x.mean(dim=dim)


def concatenate(tensors: Sequence[torch.Tensor], dim: int = 1):
    return torch.cat(list(tensors), dim=dim)


def transpose(x, dim0: int = 1, dim1: int = 2):
    return x.transpose(dim0, dim1)


def multi_head_attention(x, w_qkv, b_qkv, w_out, b_out, n_heads: int,
                         return_weights: bool = False):
    """Full (unmasked) scaled dot-product self-attention.

    x: (B, L, D); w_qkv: (3D, D); w_out: (D, D). Returns (B, L, D) and, when
    asked, the (B, H, L, L) attention weights.
    """
    B, L, D = x.shape
    _check_shape(w_qkv.shape == (3 * D, D) and D % n_heads == 0, "multi_head_attention", x, w_qkv)
    dh = D // n_heads
    qkv = linear(x, w_qkv, b_qkv).reshape(B, L, 3, n_heads, dh).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    weights = softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(B, L, D)
    out = linear(out, w_out, b_out)
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------------------
# op inventory for verification


@dataclass
class OpSpec:
    """A primitive wrapped as ``fn(*tensors) -> tensor`` plus an input sampler."""

    name: str
    fn: Callable[..., torch.Tensor]
    make_inputs: Callable[[np.random.Generator], list[np.ndarray]]
    note: str = ""


def _normal(*shape):
    return lambda rng: [rng.standard_normal(shape)]


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.standard_normal(shape)
    small = np.abs(x) <= margin
    x[small] = np.sign(x[small] + 0.5) * (margin + np.abs(rng.standard_normal(small.sum())))
    return x


def _distinct(rng, shape, gap=1e-3):
    # pool inputs: keep every value well separated so argmax cannot flip under perturbation
    n = int(np.prod(shape))
    vals = rng.permutation(n) * (4 * gap) + rng.uniform(0, gap, n)
    return (vals - vals.mean()).reshape(shape) / max(1.0, n * gap)


def op_suite() -> dict[str, OpSpec]:
    """Every differentiable primitive with representative shapes."""

    def gen_dropout(x):
        return dropout(x, 0.3, True, torch.Generator().manual_seed(1234))

    specs = [
        OpSpec("conv1d", lambda x, w, b: conv1d(x, w, b, stride=2, padding=same_padding(7)),
               lambda r: [r.standard_normal((2, 3, 11)), r.standard_normal((4, 3, 7)),
                          r.standard_normal(4)]),
        OpSpec("conv1d_valid", lambda x, w, b: conv1d(x, w, b, stride=2),
               lambda r: [r.standard_normal((2, 3, 20)), r.standard_normal((2, 3, 14)),
                          r.standard_normal(2)]),
        OpSpec("max_pool1d", lambda x: max_pool1d(x, 2), lambda r: [_distinct(r, (2, 3, 8))],
               note="inputs separated so pooling windows have a unique maximum"),
        OpSpec("batch_norm1d_train",
               lambda x, g, b: batch_norm1d(x, None, None, g, b, training=True),
               lambda r: [r.standard_normal((4, 3, 5)), r.standard_normal(3), r.standard_normal(3)]),
        OpSpec("batch_norm1d_eval",
               lambda x, g, b: batch_norm1d(x, torch.full((3,), 0.2, dtype=x.dtype),
                                            torch.full((3,), 1.5, dtype=x.dtype), g, b,
                                            training=False),
               lambda r: [r.standard_normal((4, 3, 5)), r.standard_normal(3), r.standard_normal(3)]),
        OpSpec("relu", relu, lambda r: [_away_from_zero(r, (3, 7))],
               note="checked only at |x| > 1e-3"),
        OpSpec("gelu", gelu, _normal(3, 7)),
        OpSpec("linear", linear,
               lambda r: [r.standard_normal((5, 8)), r.standard_normal((4, 8)), r.standard_normal(4)]),
        OpSpec("layer_norm", layer_norm,
               lambda r: [r.standard_normal((3, 6)), r.standard_normal(6), r.standard_normal(6)]),
        OpSpec("softmax", softmax, _normal(4, 5)),
        OpSpec("multi_head_attention",
               lambda x, wq, bq, wo, bo: multi_head_attention(x, wq, bq, wo, bo, n_heads=2),
               lambda r: [r.standard_normal((1, 5, 16)), 0.25 * r.standard_normal((48, 16)),
                          0.1 * r.standard_normal(48), 0.25 * r.standard_normal((16, 16)),
                          0.1 * r.standard_normal(16)]),
        OpSpec("dropout", gen_dropout, _normal(4, 6), note="fixed mask per evaluation"),
        OpSpec("mean_pool", mean_pool, _normal(2, 5, 3)),
        OpSpec("concatenate", lambda a, b: concatenate([a, b], dim=1),
               lambda r: [r.standard_normal((2, 1, 4)), r.standard_normal((2, 3, 4))]),
        OpSpec("transpose", transpose, _normal(2, 3, 4)),
    ]
    return {s.name: s for s in specs}


# ---------------------------------------------------------------------------
# finite-difference checker


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e})"


def grad_check(fn: Callable[..., torch.Tensor], inputs: Sequence[np.ndarray], *,
               tolerance: float = 1e-4, step: float = 1e-5, scale_floor: float = 1e-3,
               name: str = "", seed: int = 0) -> GradCheckReport:
    """Compare autograd against central differences in float64.

    The scalar probe is ``sum(w * fn(*inputs))`` with a fixed random ``w``.
    Relative error per element is ``|a - n| / max(|a|, |n|, scale_floor)``;
    the floor keeps near-zero gradients from amplifying rounding noise.
    """
    xs = [torch.tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in inputs]
    out = fn(*xs)
    w = torch.from_numpy(np.random.default_rng(seed).standard_normal(tuple(out.shape)))

    def probe(*args):
        return (fn(*args) * w).sum()

    analytic = torch.autograd.grad(probe(*xs), xs, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g for x, g in zip(xs, analytic)]
    for i, g in enumerate(analytic):
        if not torch.all(torch.isfinite(g)):
            dump = "\n".join(f"  input {j}: {x.detach().numpy()!r}" for j, x in enumerate(xs))
            raise NonFiniteGradientError(f"{name or fn}: non-finite gradient for input {i}\n{dump}")

    per_input = []
    with torch.no_grad():
        base = [x.detach().clone() for x in xs]
        for i, x in enumerate(base):
            numeric = torch.zeros_like(x)
            flat = x.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                hi = probe(*base).item()
                flat[j] = orig - step
                lo = probe(*base).item()
                flat[j] = orig
                numeric.view(-1)[j] = (hi - lo) / (2 * step)
            a = analytic[i]
            denom = torch.clamp(torch.maximum(a.abs(), numeric.abs()), min=scale_floor)
            err = ((a - numeric).abs() / denom).max().item() if a.numel() else 0.0
            per_input.append(err)
    return GradCheckReport(name, max(per_input, default=0.0), tolerance, per_input)


# ---------------------------------------------------------------------------
# optimiser


def sgd_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor],
             velocities: Sequence[torch.Tensor], *, lr: float, momentum: float = 0.9,
             weight_decay: float = 1e-3, nesterov: bool = True) -> None:
    """In-place SGD update with L2 weight decay and (Nesterov) momentum.

    ``g <- grad + wd * p``; ``v <- mu * v + g``; ``p <- p - lr * (g + mu * v)``
    (or ``p - lr * v`` without Nesterov). Raises before touching anything if a
    gradient is non-finite.
    """
    for i, g in enumerate(grads):
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {i}; step aborted")
    with torch.no_grad():
        for p, g, v in zip(params, grads, velocities):
            g = g + weight_decay * p if weight_decay else g.clone()
            v.mul_(momentum).add_(g)
            p.sub_(lr * (g + momentum * v) if nesterov else lr * v)


class NesterovSGD(torch.optim.Optimizer):
    """``torch.optim`` wrapper around :func:`sgd_step`; velocities start at zero."""

    def __init__(self, params, lr: float = 1e-3, momentum: float = 0.9,
                 weight_decay: float = 1e-3, nesterov: bool = True):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay,
                                      nesterov=nesterov))

    def set_lr(self, lr: float) -> None:
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        for group in self.param_groups:
            group["lr"] = lr

    @torch.no_grad()
    def step(self, closure=None):
        loss = closure() if closure is not None else None
        for group in self.param_groups:
            ps = [p for p in group["params"] if p.grad is not None]
            vs = []
            for p in ps:
                state = self.state[p]
                if "velocity" not in state:
                    state["velocity"] = torch.zeros_like(p)
                vs.append(state["velocity"])
            sgd_step(ps, [p.grad for p in ps], vs, lr=group["lr"], momentum=group["momentum"],
                     weight_decay=group["weight_decay"], nesterov=group["nesterov"])
        return loss


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass(frozen=True)
class ScheduleParams:
    lr0: float = 1e-3
    lam: float = 10.0
    eta: int = 40

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 10 <= self.lam <= 40:
            raise ConfigError(f"lambda must lie in [10, 40], got {self.lam}")
        if not 40 <= self.eta <= 200:
            raise ConfigError(f"eta must lie in [40, 200], got {self.eta}")


def lr_schedule(params: ScheduleParams, epoch: int) -> float:
    """``lr0 / (1 + lam * e / eta) ** 0.75`` for ``e < eta``, frozen afterwards."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    e = min(epoch, params.eta - 1)
    return params.lr0 / (1.0 + params.lam * e / params.eta) ** 0.75


def parameter_count(params: Iterable[torch.Tensor]) -> int:
    return sum(p.numel() for p in params)
