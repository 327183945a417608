"""The AMAuT network and its checkpoint format.

Pipeline: mono -> log-Mel (F x T) -> 1D CNN (D x K) -> transpose + CLS/TAL +
positions -> full-attention encoder -> duration-dependent classifier head.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .audio_io import AudioClip, stereo_to_mono
from .errors import CapacityError, CheckpointError, ConfigError, PlanError, ShapeError
from .frontend import MelParams, horizontal_tokenize, mel_spectrogram

TAIL_KERNEL = 14
BOTTLENECK_KERNEL = 7
TOKEN_DROPOUT = 0.15
# the positional table runs P_0 .. P_{768+1}
DEFAULT_MAX_POSITIONS = 768 + 2


# ---------------------------------------------------------------------------
# configuration and depth planning


@dataclass(frozen=True)
class StageSpec:
    n_blocks: int
    mid_channels: int
    stride: int


@dataclass(frozen=True)
class CnnPlan:
    in_frames: int
    tail_stride: int
    tail_pool: int
    tail_padding: tuple[int, int]
    stages: tuple[StageSpec, ...]
    out_len: int

    @property
    def n_downsampling_stages(self) -> int:
        return sum(1 for s in self.stages if s.stride > 1)

    @property
    def depth(self) -> int:
        """Convolution layer count: tail + three per bottleneck block + head."""
        return 1 + 3 * sum(s.n_blocks for s in self.stages) + 1

    def lengths(self, frames: int) -> list[int]:
        """Temporal length after the tail and after each stage for a given input length."""
        pad = sum(self.tail_padding)
        L = nx.conv_out_len(frames, TAIL_KERNEL, self.tail_stride, pad) // self.tail_pool
        out = [L]
        for s in self.stages:
            L = nx.conv_out_len(L, BOTTLENECK_KERNEL, s.stride, BOTTLENECK_KERNEL - 1)
            out.append(L)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tail_padding"] = list(self.tail_padding)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CnnPlan":
        return cls(
            in_frames=d["in_frames"], tail_stride=d["tail_stride"], tail_pool=d["tail_pool"],
            tail_padding=tuple(d["tail_padding"]),
            stages=tuple(StageSpec(**s) for s in d["stages"]), out_len=d["out_len"],
        )


def plan_cnn(input_frames: int, target_K: int, mid_channels: int = 64,
             blocks_per_stage: int = 1) -> CnnPlan:
    """Choose tail mode and stride-2 stage count so ``target_K <= K < 2 * target_K``.

    The tail (conv14, stride 2, unpadded, then max-pool 2) is used whenever it
    leaves at least ``target_K`` frames; otherwise it runs length-preserving
    (stride 1, zero padded, no pooling). Every plan ends with one stride-1
    stage so there is always a bottleneck body.
    """
    T = int(input_frames)
    if target_K < 1:
        raise PlanError(f"target_K must be >= 1, got {target_K}")
    if T < target_K:
        raise PlanError(
            f"{T} input frames cannot reach target_K={target_K}; use target_K <= {T}"
        )
    reduced = (nx.conv_out_len(T, TAIL_KERNEL, 2) // 2) if T >= TAIL_KERNEL else -1
    if reduced >= target_K:
        stride, pool, pad, L = 2, 2, (0, 0), reduced
    else:
        stride, pool, pad, L = 1, 1, nx.same_padding(TAIL_KERNEL), T
    n_down = 0
    while L >= 2 * target_K:
        L = -(-L // 2)
        n_down += 1
    stages = tuple([StageSpec(blocks_per_stage, mid_channels, 2)] * n_down
                   + [StageSpec(blocks_per_stage, mid_channels, 1)])
    return CnnPlan(T, stride, pool, pad, stages, L)


def variant_for_duration(duration_s: float) -> str:
    return "long" if duration_s > 1.0 + 1e-9 else "short"


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 128
    n_classes: int = 2
    embed_dim: int = 768
    n_heads: int = 8
    n_blocks: int = 4
    mlp_ratio: float = 4.0
    cnn_width: int = 256
    cnn_mid: int = 64
    blocks_per_stage: int = 1
    target_K: int = 12
    input_frames: int = 98
    token_dropout: float = TOKEN_DROPOUT
    attn_dropout: float = 0.0
    classifier_variant: str = "short"
    max_positions: int = DEFAULT_MAX_POSITIONS

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.token_dropout != TOKEN_DROPOUT:
            raise ConfigError(f"token_dropout is fixed at {TOKEN_DROPOUT}")
        if self.attn_dropout != 0.0:
            raise ConfigError("attention/MLP dropout is fixed at 0")
        if self.classifier_variant not in ("long", "short"):
            raise ConfigError(f"classifier_variant must be long|short, got {self.classifier_variant!r}")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.max_positions < 3:
            raise ConfigError("max_positions must be >= 3")

    @property
    def plan(self) -> CnnPlan:
        return plan_cnn(self.input_frames, self.target_K, self.cnn_mid, self.blocks_per_stage)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def for_input(cls, mel: MelParams, sample_rate: int, duration_s: float, **kw) -> "ModelConfig":
        """Derive input frames, channel count and head variant from the audio format."""
        frames = mel.n_frames(int(round(duration_s * sample_rate)), sample_rate)
        kw.setdefault("classifier_variant", variant_for_duration(duration_s))
        return cls(in_channels=mel.n_mels, input_frames=frames, **kw)


# ---------------------------------------------------------------------------
# layers


class Conv(nn.Conv1d):
    """Conv1d with asymmetric zero padding support."""

    def __init__(self, cin, cout, kernel, stride=1, pad=(0, 0), bias=True):
        super().__init__(cin, cout, kernel, stride=stride, bias=bias)
        self.pad = tuple(pad)

    def forward(self, x):
        return nx.conv1d(x, self.weight, self.bias, stride=self.stride[0], padding=self.pad)


class Bottleneck(nn.Module):
    """conv1 -> BN -> ReLU -> conv7 -> BN -> ReLU -> conv1 -> BN (+identity) -> ReLU."""

    def __init__(self, width: int, mid: int, stride: int):
        super().__init__()
        self.reduce = Conv(width, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm1d(mid, momentum=nx.BN_MOMENTUM)
        self.mix = Conv(mid, mid, BOTTLENECK_KERNEL, stride=stride,
                        pad=nx.same_padding(BOTTLENECK_KERNEL), bias=False)
        self.bn2 = nn.BatchNorm1d(mid, momentum=nx.BN_MOMENTUM)
        self.expand = Conv(mid, width, 1, bias=False)
        self.bn3 = nn.BatchNorm1d(width, momentum=nx.BN_MOMENTUM)
        self.residual = stride == 1

    def forward(self, x):
        y = nx.relu(self.bn1(self.reduce(x)))
        y = nx.relu(self.bn2(self.mix(y)))
        y = self.bn3(self.expand(y))
        if self.residual and y.shape == x.shape:
            y = y + x
        return nx.relu(y)


class CNN1d(nn.Module):
    def __init__(self, cfg: ModelConfig, plan: CnnPlan):
        super().__init__()
        self.plan = plan
        self.in_channels = cfg.in_channels
        self.tail = Conv(cfg.in_channels, cfg.cnn_width, TAIL_KERNEL, stride=plan.tail_stride,
                         pad=plan.tail_padding)
        self.tail_bn = nn.BatchNorm1d(cfg.cnn_width, momentum=nx.BN_MOMENTUM)
        blocks = []
        for stage in plan.stages:
            for b in range(stage.n_blocks):
                blocks.append(Bottleneck(cfg.cnn_width, stage.mid_channels,
                                         stage.stride if b == 0 else 1))
        self.blocks = nn.ModuleList(blocks)
        self.head = Conv(cfg.cnn_width, cfg.embed_dim, 1)

    def forward(self, x):
        """(B, F, T) -> (B, D, K)."""
        if x.dim() != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"CNN layer 0 (tail): expected (B, {self.in_channels}, T), got {tuple(x.shape)}"
            )
        x = nx.relu(self.tail_bn(self.tail(x)))
        if self.plan.tail_pool > 1:
            x = nx.max_pool1d(x, self.plan.tail_pool)
        for i, block in enumerate(self.blocks):
            try:
                x = block(x)
            except (RuntimeError, ShapeError) as exc:
                raise ShapeError(f"CNN block {i}: {exc}") from exc
        return self.head(x)


class VerticalEmbedding(nn.Module):
    """Transpose D x K features to K tokens, wrap in CLS/TAL, add positions, drop out."""

    def __init__(self, dim: int, max_positions: int, p: float = TOKEN_DROPOUT):
        super().__init__()
        self.cls = nn.Parameter(0.02 * torch.randn(1, 1, dim))
        self.tal = nn.Parameter(0.02 * torch.randn(1, 1, dim))
        self.pos = nn.Parameter(0.02 * torch.randn(1, max_positions, dim))
        self.p = p

    def forward(self, feat):
        B, D, K = feat.shape
        if K + 2 > self.pos.shape[1]:
            raise CapacityError(
                f"K={K} needs {K + 2} positions but the table holds {self.pos.shape[1]}"
            )
        x = nx.transpose(feat, 1, 2)
        h = nx.concatenate([self.cls.expand(B, 1, D), x, self.tal.expand(B, 1, D)], dim=1)
        return nx.dropout(h + self.pos[:, :K + 2], self.p, self.training)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block with full self-attention and a GELU MLP."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        hidden = int(round(dim * mlp_ratio))
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, return_weights: bool = False):
        a, w = nx.multi_head_attention(
            nx.layer_norm(x, self.ln1.weight, self.ln1.bias),
            self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias,
            self.n_heads, return_weights=True,
        )
        x = x + a
        h = nx.layer_norm(x, self.ln2.weight, self.ln2.bias)
        x = x + nx.linear(nx.gelu(nx.linear(h, self.fc1.weight, self.fc1.bias)),
                          self.fc2.weight, self.fc2.bias)
        return (x, w) if return_weights else x


class Encoder(nn.Module):
    def __init__(self, dim: int, n_heads: int, n_blocks: int, mlp_ratio: float):
        super().__init__()
        self.blocks = nn.ModuleList(EncoderBlock(dim, n_heads, mlp_ratio) for _ in range(n_blocks))

    def forward(self, x, return_weights: bool = False):
        weights = []
        for block in self.blocks:
            x, w = block(x, return_weights=True)
            weights.append(w)
        return (x, weights) if return_weights else x


class LongHead(nn.Module):
    """CLS and TAL only: conv over the two-token axis (kernel 2), then FC."""

    variant = "long"

    def __init__(self, dim: int, n_classes: int):
        super().__init__()
        self.conv = Conv(dim, dim, 2)
        self.fc = nn.Linear(dim, n_classes)

    def forward(self, seq):
        ends = nx.concatenate([seq[:, :1], seq[:, -1:]], dim=1)  # (B, 2, D)
        z = self.conv(nx.transpose(ends, 1, 2)).squeeze(-1)
        return nx.linear(z, self.fc.weight, self.fc.bias)


class ShortHead(nn.Module):
    """Mean over all tokens, then three FC layers with BN + ReLU between."""

    variant = "short"

    def __init__(self, dim: int, n_classes: int):
        super().__init__()
        h1, h2 = max(dim // 2, 1), max(dim // 4, 1)
        self.fc1 = nn.Linear(dim, h1)
        self.bn1 = nn.BatchNorm1d(h1, momentum=nx.BN_MOMENTUM)
        self.fc2 = nn.Linear(h1, h2)
        self.bn2 = nn.BatchNorm1d(h2, momentum=nx.BN_MOMENTUM)
        self.fc3 = nn.Linear(h2, n_classes)

    def forward(self, seq):
        z = nx.mean_pool(seq, dim=1)
        z = nx.relu(self.bn1(self.fc1(z)))
        z = nx.relu(self.bn2(self.fc2(z)))
        return self.fc3(z)


class AMAuT(nn.Module):
    def __init__(self, cfg: ModelConfig, mel: Optional[MelParams] = None):
        super().__init__()
        self.cfg = cfg
        self.mel = mel if mel is not None else MelParams(n_mels=cfg.in_channels)
        if self.mel.n_mels != cfg.in_channels:
            raise ConfigError(f"mel bins {self.mel.n_mels} != model input channels {cfg.in_channels}")
        self.cnn = CNN1d(cfg, cfg.plan)
        self.embed = VerticalEmbedding(cfg.embed_dim, cfg.max_positions)
        self.encoder = Encoder(cfg.embed_dim, cfg.n_heads, cfg.n_blocks, cfg.mlp_ratio)
        head_cls = LongHead if cfg.classifier_variant == "long" else ShortHead
        self.head = head_cls(cfg.embed_dim, cfg.n_classes)

    def features(self, tokens):
        return self.cnn(tokens)

    def forward(self, tokens):
        """(B, F, T) log-Mel tokens -> (B, C) logits."""
        return self.head(self.encoder(self.embed(self.cnn(tokens))))

    def parameter_count(self) -> int:
        return nx.parameter_count(self.parameters())


def classify_long(head: nn.Module, seq):
    if getattr(head, "variant", None) != "long":
        raise ConfigError("classify_long called on a model configured for short audio")
    return head(seq)


def classify_short(head: nn.Module, seq):
    if getattr(head, "variant", None) != "short":
        raise ConfigError("classify_short called on a model configured for long audio")
    return head(seq)


# ---------------------------------------------------------------------------
# clip -> tensor


def featurize(clips: Sequence[AudioClip], mel: MelParams) -> np.ndarray:
    """Stack log-Mel matrices into (B, F, T); shorter clips are zero padded at the end."""
    mono = [stereo_to_mono(c) for c in clips]
    n = max(c.n_frames for c in mono)
    out = []
    for c in mono:
        if c.n_frames < n:
            c = c.with_samples(np.pad(c.samples, (0, n - c.n_frames)))
        out.append(horizontal_tokenize(mel_spectrogram(c, mel)).values)
    return np.stack(out)


def to_tensor(feats: np.ndarray, like: nn.Module) -> torch.Tensor:
    dtype = next(like.parameters()).dtype
    return torch.from_numpy(np.ascontiguousarray(feats)).to(dtype)


def forward_clips(model: AMAuT, clips: Sequence[AudioClip], mode: str = "eval") -> torch.Tensor:
    """Full pipeline from raw clips to logits in the requested mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train|eval, got {mode!r}")
    model.train(mode == "train")
    x = to_tensor(featurize(clips, model.mel), model)
    if mode == "eval":
        with torch.no_grad():
            return model(x)
    return model(x)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"AMAUTCKPT"
VERSION = 1


def save_checkpoint(model: AMAuT, path, *, epoch: int = 0, rng_state=None,
                    extra: Optional[dict] = None) -> None:
    """Write magic, version, length-prefixed JSON header, then f32 tensor records."""
    state = model.state_dict()
    header = {
        "model": model.cfg.to_dict(),
        "mel": model.mel.to_dict(),
        "epoch": int(epoch),
        "rng_state": rng_state,
        "n_tensors": len(state),
        "extra": extra or {},
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(text)))
    buf.write(text)
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: not an AMAuT checkpoint (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    try:
        header = json.loads(r.take(r.u32("header length"), "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    tensors = {}
    for i in range(header["n_tensors"]):
        name = r.take(r.u32(f"tensor {i} name length"), f"tensor {i} name").decode("utf-8")
        ndim = r.u32(f"{name} rank")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{name} shape"))
        count = int(np.prod(shape)) if ndim else 1
        raw = r.take(4 * count, f"{name} data")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes after last tensor")
    return header, tensors


def load_checkpoint(path) -> tuple[AMAuT, dict]:
    """Rebuild the model; returns ``(model, header)`` with the model in eval mode."""
    header, tensors = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(header["model"])
        mel = MelParams(**header["mel"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: header missing fields: {exc}") from exc
    model = AMAuT(cfg, mel)
    ref = model.state_dict()
    if set(ref) != set(tensors):
        missing = sorted(set(ref) - set(tensors))
        unexpected = sorted(set(tensors) - set(ref))
        raise CheckpointError(f"{path}: tensor mismatch, missing={missing} unexpected={unexpected}")
    state = {}
    for name, t in ref.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {tuple(t.shape)}")
        state[name] = torch.from_numpy(arr.copy()).to(t.dtype)
    model.load_state_dict(state)
    model.eval()
    return model, header
