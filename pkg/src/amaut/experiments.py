"""Toy-scale ablations: multiview vs single-view training, and TTDA descent.

These reproduce trend *directions* on the synthetic corpus, not benchmark
numbers. Every function is deterministic in its seed arguments.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .audio_io import AudioClip, SynthSpec, generate_noise_bank, generate_synth_corpus
from .augment import background_mix, gaussian_noise, time_shift
from .frontend import MelParams
from .losses import TTDAConfig, ttda_objective
from .model import AMAuT, ModelConfig
from .training import TrainConfig, accuracy, predict_proba, train
from .tta import agreement_rate, ttda_adapt

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToySetup:
    """A small, fast configuration for seed sweeps."""

    synth: SynthSpec = SynthSpec(n_classes=4, clips_per_class=16, duration_s=0.5,
                                 sample_rate=8000, freq_ratio=2 ** (1 / 6), freq_jitter=0.02)
    mel: MelParams = MelParams(n_mels=32)
    embed_dim: int = 32
    n_heads: int = 4
    n_blocks: int = 1
    cnn_width: int = 32
    cnn_mid: int = 16
    target_K: int = 6
    train: TrainConfig = TrainConfig(epochs=20, batch_size=16, lr0=0.01, lam=10, eta=40)

    def model_config(self) -> ModelConfig:
        return ModelConfig.for_input(
            self.mel, self.synth.sample_rate, self.synth.duration_s,
            n_classes=self.synth.n_classes, embed_dim=self.embed_dim, n_heads=self.n_heads,
            n_blocks=self.n_blocks, cnn_width=self.cnn_width, cnn_mid=self.cnn_mid,
            target_K=self.target_K,
        )

    def build(self, seed: int) -> AMAuT:
        torch.manual_seed(seed)
        return AMAuT(self.model_config(), self.mel)


def corrupt(clips: Sequence[AudioClip], rng: np.random.Generator, noise_bank: Sequence[AudioClip],
            *, shift: float = 0.17, noise_ratio: float = 0.0, snr_db: Optional[float] = None
            ) -> list[AudioClip]:
    """Random shift, optional white noise and optional background mix per clip."""
    out = []
    for c in clips:
        if shift > 0:
            c = time_shift(c, float(rng.uniform(0, shift)), "right" if rng.random() < 0.5 else "left")
        if noise_ratio > 0:
            c = gaussian_noise(c, noise_ratio, rng)
        if snr_db is not None:
            c = background_mix(c, noise_bank[int(rng.integers(len(noise_bank)))], snr_db, rng)
        out.append(c)
    return out


@dataclass
class TrendResult:
    acc4: list[float] = field(default_factory=list)
    acc1: list[float] = field(default_factory=list)
    agree4: list[float] = field(default_factory=list)
    agree1: list[float] = field(default_factory=list)

    @property
    def wins(self) -> int:
        return sum(a > b for a, b in zip(self.acc4, self.acc1))

    @property
    def agreement_wins(self) -> int:
        return sum(a >= b for a, b in zip(self.agree4, self.agree1))


def multiview_trend(n_pairs: int = 10, setup: ToySetup = ToySetup(), *,
                    test_noise_ratio: float = 0.03, test_snr_db: float = 20.0,
                    n_test_per_class: int = 25) -> TrendResult:
    """Four-view vs one-view training on a noisy held-out split.

    For pair ``i`` two models of each kind are trained with seeds ``2i`` and
    ``2i + 1`` on the same corpus. Accuracy is the mean of the two models;
    agreement is measured between them.
    """
    result = TrendResult()
    sr = setup.synth.sample_rate
    for i in range(n_pairs):
        _, train_clips = generate_synth_corpus(replace(setup.synth, seed=1000 + i))
        labels = [k for _ in range(setup.synth.clips_per_class) for k in range(setup.synth.n_classes)]
        test_spec = replace(setup.synth, seed=5000 + i, clips_per_class=n_test_per_class)
        _, test_clean = generate_synth_corpus(test_spec)
        test_labels = np.array([k for _ in range(n_test_per_class) for k in range(setup.synth.n_classes)])
        unseen_bank = generate_noise_bank(sr, seed=777 + i)
        test = corrupt(test_clean, np.random.default_rng([i, 99]), unseen_bank,
                       noise_ratio=test_noise_ratio, snr_db=test_snr_db)
        bank = generate_noise_bank(sr, seed=i)

        preds = {}
        for recipe in ("train4", "train1"):
            for s in (2 * i, 2 * i + 1):
                model = setup.build(s)
                res = train(model, train_clips, labels, replace(setup.train, recipe=recipe, seed=s),
                            noise_bank=bank)
                model.load_state_dict(res.best_state)
                preds[recipe, s] = predict_proba(model, test).argmax(axis=1)
        C = setup.synth.n_classes
        for recipe, accs, agrees in (("train4", result.acc4, result.agree4),
                                     ("train1", result.acc1, result.agree1)):
            a, b = preds[recipe, 2 * i], preds[recipe, 2 * i + 1]
            accs.append(float((np.mean(a == test_labels) + np.mean(b == test_labels)) / 2))
            agrees.append(agreement_rate(a, b, C))
        logger.info("pair %d: acc4 %.3f acc1 %.3f agree4 %.3f agree1 %.3f", i,
                    result.acc4[-1], result.acc1[-1], result.agree4[-1], result.agree1[-1])
    return result


@dataclass
class DescentResult:
    epoch_losses: list[list[float]] = field(default_factory=list)
    acc_before: list[float] = field(default_factory=list)
    acc_after: list[float] = field(default_factory=list)

    def monotone_first(self, n: int = 3) -> int:
        """Seeds whose epoch-mean objective strictly decreases over the first ``n`` epochs."""
        return sum(all(t[j + 1] < t[j] for j in range(n - 1)) for t in self.epoch_losses)


def ttda_descent(n_seeds: int = 10, setup: ToySetup = ToySetup(),
                 ttda: TTDAConfig = TTDAConfig(), *, shift: float = 0.17,
                 n_test_per_class: int = 16) -> DescentResult:
    """Train on clean clips, adapt on time-shifted clips, compare before/after."""
    result = DescentResult()
    sr = setup.synth.sample_rate
    for s in range(n_seeds):
        _, train_clips = generate_synth_corpus(replace(setup.synth, seed=2000 + s))
        labels = [k for _ in range(setup.synth.clips_per_class) for k in range(setup.synth.n_classes)]
        model = setup.build(s)
        res = train(model, train_clips, labels, replace(setup.train, recipe="train4", seed=s),
                    noise_bank=generate_noise_bank(sr, seed=s))
        model.load_state_dict(res.best_state)

        test_spec = replace(setup.synth, seed=6000 + s, clips_per_class=n_test_per_class)
        _, test_clean = generate_synth_corpus(test_spec)
        test_labels = [k for _ in range(n_test_per_class) for k in range(setup.synth.n_classes)]
        test = corrupt(test_clean, np.random.default_rng([s, 7]), (), shift=shift)

        result.acc_before.append(accuracy(model, test, test_labels))
        model, trace = ttda_adapt(model, test, ttda, seed=s)
        result.acc_after.append(accuracy(model, test, test_labels))
        result.epoch_losses.append(trace.epoch_means())
        logger.info("seed %d: acc %.3f -> %.3f, losses %s", s, result.acc_before[-1],
                    result.acc_after[-1], np.round(trace.epoch_means(), 4))
    return result
