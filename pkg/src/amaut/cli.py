"""``amaut`` command line: train, adapt, eval, agree and synth subcommands.

Every command writes one JSON object per line to ``metrics.jsonl`` in the
output directory. Wall-clock durations go to a separate ``timing.jsonl`` so
that the metrics file is byte-identical across reruns of the same config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from .audio_io import (
    AudioClip,
    generate_noise_bank,
    generate_synth_corpus,
    load_manifest,
    stereo_to_mono,
    write_corpus,
)
from .config import PROFILES, REFINE_MODES, ExperimentConfig, load_config
from .errors import (
    AmautError,
    ConfigError,
    DataError,
    DivergenceError,
    EnsembleError,
    exit_code_for,
)
from .model import AMAuT, ModelConfig, load_checkpoint, save_checkpoint
from .training import EpochRecord, accuracy, train
from .tta import (
    agreement_rate,
    aug_refine,
    confusion_matrix,
    hyb_refine,
    mlt_refine,
    model_predictor,
    ttda_adapt,
)

logger = logging.getLogger("amaut")

EVAL_STREAM = 4


class MetricsWriter:
    """Appends one JSON record per line; non-finite floats become null."""

    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("", encoding="utf-8")

    def write(self, **record) -> None:
        clean = {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                 for k, v in record.items()}
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(clean, sort_keys=True) + "\n")


def run_id(cfg: ExperimentConfig, command: str) -> str:
    body = cfg.to_dict()
    body.pop("output_dir")
    digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
    return f"{command}-{digest[:12]}"


def _mono(clips: Sequence[AudioClip]) -> list[AudioClip]:
    return [stereo_to_mono(c) for c in clips]


def _load_labeled(path: Path) -> tuple[list[AudioClip], list[int], list[str]]:
    m = load_manifest(path)
    return _mono(m.load_clips()), m.labels, m.class_names


def load_training_data(cfg: ExperimentConfig):
    """Returns ``(train_clips, train_labels, val_clips, val_labels, class_names)``."""
    ds = cfg.dataset
    if ds.synth is not None:
        manifest, clips = generate_synth_corpus(ds.synth)
        labels, names = manifest.labels, manifest.class_names[:ds.synth.n_classes]
    else:
        clips, labels, names = _load_labeled(ds.manifest)
    if not clips:
        raise DataError("training set is empty")
    val_clips: list[AudioClip] = []
    val_labels: list[int] = []
    if ds.val_manifest is not None:
        val_clips, val_labels, val_names = _load_labeled(ds.val_manifest)
        if val_names != names:
            raise DataError("validation manifest declares different classes")
    elif ds.val_fraction > 0:
        rng = np.random.default_rng([cfg.seed, 0x5A1])
        order = rng.permutation(len(clips))
        n_val = max(1, int(round(ds.val_fraction * len(clips))))
        held, kept = sorted(order[:n_val]), sorted(order[n_val:])
        val_clips, val_labels = [clips[i] for i in held], [labels[i] for i in held]
        clips, labels = [clips[i] for i in kept], [labels[i] for i in kept]
    if len(clips) < 2:
        raise DataError("training needs at least two clips after the validation split")
    return clips, labels, val_clips, val_labels, names


def build_model(cfg: ExperimentConfig, clips: Sequence[AudioClip], n_classes: int) -> AMAuT:
    longest = max(clips, key=lambda c: c.duration_s)
    kw = {"n_classes": n_classes, **cfg.model}
    mcfg = ModelConfig.for_input(cfg.mel, longest.sample_rate, longest.duration_s, **kw)
    torch.manual_seed(cfg.seed)
    return AMAuT(mcfg, cfg.mel)


def cmd_train(cfg: ExperimentConfig) -> dict:
    clips, labels, val_clips, val_labels, names = load_training_data(cfg)
    model = build_model(cfg, clips, len(names))
    rid = run_id(cfg, "train")
    out = cfg.output_dir
    metrics = MetricsWriter(out / "metrics.jsonl")
    timing = MetricsWriter(out / "timing.jsonl")
    bank = generate_noise_bank(clips[0].sample_rate, seed=cfg.seed)
    clock = [time.perf_counter()]

    def on_epoch(rec: EpochRecord) -> None:
        train_acc = accuracy(model, clips, labels)
        metrics.write(run_id=rid, epoch=rec.epoch, split="train", loss=rec.train_loss,
                      accuracy=train_acc, lr=rec.lr, skipped_steps=rec.skipped_steps,
                      seed=cfg.seed)
        if rec.val_accuracy is not None:
            metrics.write(run_id=rid, epoch=rec.epoch, split="val", loss=None,
                          accuracy=rec.val_accuracy, seed=cfg.seed)
        now = time.perf_counter()
        timing.write(run_id=rid, epoch=rec.epoch, seconds=now - clock[0])
        clock[0] = now

    result = train(model, clips, labels, cfg.train, noise_bank=bank, val_clips=val_clips,
                   val_labels=val_labels, on_epoch=on_epoch)
    model.load_state_dict(result.best_state)
    ckpt = out / "checkpoint.ckpt"
    save_checkpoint(model, ckpt, epoch=max(result.best_epoch, 0),
                    rng_state={"seed": cfg.seed},
                    extra={"class_names": names, "run_id": rid})
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    final_acc = accuracy(model, clips, labels)
    summary = {"checkpoint": str(ckpt), "best_epoch": result.best_epoch,
               "train_accuracy": final_acc, "epochs": len(result.history)}
    if val_clips:
        summary["val_accuracy"] = result.best_accuracy
    return summary


def _test_manifest(cfg: ExperimentConfig, manifest: Optional[Path]) -> Path:
    path = manifest or cfg.dataset.test_manifest
    if path is None:
        raise ConfigError("no test manifest given (use --manifest or dataset.test_manifest)")
    return Path(path)


def cmd_adapt(cfg: ExperimentConfig, checkpoint: Path, manifest: Optional[Path] = None) -> dict:
    """TTDA on an unlabeled manifest. Labels are never parsed."""
    model, header = load_checkpoint(checkpoint)
    m = load_manifest(_test_manifest(cfg, manifest), with_labels=False)
    clips = _mono(m.load_clips())
    if not clips:
        raise DataError("test manifest is empty")
    out = cfg.output_dir
    rid = run_id(cfg, "adapt")
    metrics = MetricsWriter(out / "metrics.jsonl")
    start = time.perf_counter()
    model, trace = ttda_adapt(model, clips, cfg.ttda, seed=cfg.seed)
    MetricsWriter(out / "timing.jsonl").write(run_id=rid, seconds=time.perf_counter() - start)
    tracefile = MetricsWriter(out / "ttda_trace.jsonl")
    for epoch, batch, loss in trace.records:
        tracefile.write(epoch=epoch, batch=batch, loss=loss)
    for epoch, loss in enumerate(trace.epoch_means()):
        metrics.write(run_id=rid, epoch=epoch, split="adapt", loss=loss, accuracy=None,
                      seed=cfg.seed)
    if trace.diverged:
        raise DivergenceError(trace.diagnostic)
    extra = dict(header.get("extra") or {})
    if cfg.ttda.epochs > 0:
        extra["ttda"] = cfg.ttda.to_dict()
    ckpt = out / "adapted.ckpt"
    save_checkpoint(model, ckpt, epoch=header.get("epoch", 0),
                    rng_state=header.get("rng_state"), extra=extra)
    return {"checkpoint": str(ckpt), "steps": len(trace), "epoch_losses": trace.epoch_means()}


def _load_members(checkpoints: Sequence[Path]) -> list[AMAuT]:
    if not checkpoints:
        raise ConfigError("at least one --checkpoint is required")
    models = [load_checkpoint(p)[0] for p in checkpoints]
    counts = {m.cfg.n_classes for m in models}
    if len(counts) > 1:
        raise EnsembleError(f"checkpoints disagree on class count: {sorted(counts)}")
    return models


def evaluate(probs: np.ndarray, labels: Sequence[int], n_classes: int) -> dict:
    labels = np.asarray(labels)
    pred = probs.argmax(axis=1)
    cm = confusion_matrix(labels, pred, n_classes)
    support = cm.sum(axis=1)
    recall = [float(cm[k, k] / support[k]) if support[k] else None for k in range(n_classes)]
    return {"accuracy": float(np.trace(cm) / cm.sum()), "per_class_recall": recall,
            "confusion": cm.tolist(), "n": int(labels.size)}


def cmd_eval(cfg: ExperimentConfig, checkpoints: Sequence[Path], manifest: Optional[Path] = None,
             refine: Optional[str] = None) -> dict:
    mode = refine or cfg.refine.mode
    if mode not in REFINE_MODES:
        raise ConfigError(f"unknown refine mode {mode!r}")
    models = _load_members(checkpoints)
    if mode in ("mlt", "hyb") and len(models) < cfg.refine.M:
        raise EnsembleError(f"refine={mode} needs M={cfg.refine.M} checkpoints, got {len(models)}")
    clips, labels, names = _load_labeled(_test_manifest(cfg, manifest))
    C = models[0].cfg.n_classes
    if len(names) != C:
        raise ConfigError(f"manifest has {len(names)} classes but checkpoints have {C}")
    rng = np.random.default_rng([cfg.seed, EVAL_STREAM])
    predictors = [model_predictor(m) for m in models]
    if mode == "none":
        probs = predictors[0](clips)
    elif mode == "aug":
        probs = aug_refine(predictors[0], clips, cfg.refine.A, rng=rng)
    elif mode == "mlt":
        probs = mlt_refine(predictors[:cfg.refine.M], clips)
    else:
        probs = hyb_refine(predictors[:cfg.refine.M], clips, cfg.refine.A, rng=rng)
    report = {"refine": mode, **evaluate(probs, labels, C)}
    MetricsWriter(cfg.output_dir / "metrics.jsonl").write(
        run_id=run_id(cfg, "eval"), epoch=None, split="test", loss=None,
        accuracy=report["accuracy"], seed=cfg.seed)
    (cfg.output_dir / "eval.json").write_text(json.dumps(report, sort_keys=True, indent=1))
    return report


def cmd_agree(cfg: ExperimentConfig, checkpoint_a: Path, checkpoint_b: Path,
              manifest: Optional[Path] = None) -> dict:
    a, b = _load_members([checkpoint_a, checkpoint_b])
    clips = _mono(load_manifest(_test_manifest(cfg, manifest), with_labels=False).load_clips())
    if not clips:
        raise DataError("manifest is empty")
    pa = model_predictor(a)(clips).argmax(axis=1)
    pb = model_predictor(b)(clips).argmax(axis=1)
    rate = agreement_rate(pa, pb, a.cfg.n_classes)
    MetricsWriter(cfg.output_dir / "metrics.jsonl").write(
        run_id=run_id(cfg, "agree"), epoch=None, split="test", agreement=rate, seed=cfg.seed)
    return {"agreement": rate, "n": len(clips)}


def cmd_synth(cfg: ExperimentConfig) -> dict:
    spec = cfg.dataset.synth
    if spec is None:
        raise ConfigError("synth needs a dataset.synth section")
    manifest, clips = generate_synth_corpus(spec)
    path = write_corpus(cfg.output_dir, manifest, clips)
    return {"manifest": str(path), "clips": len(clips)}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--profile", choices=PROFILES, help="named hyperparameter profile")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="amaut", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model")
    ad = sub.add_parser("adapt", parents=[common], help="test-time adaptation on unlabeled clips")
    ad.add_argument("--checkpoint", type=Path, required=True)
    ad.add_argument("--manifest", type=Path)
    ev = sub.add_parser("eval", parents=[common], help="accuracy with optional refinement")
    ev.add_argument("--checkpoint", type=Path, action="append", default=[])
    ev.add_argument("--manifest", type=Path)
    ev.add_argument("--refine", choices=REFINE_MODES)
    ag = sub.add_parser("agree", parents=[common], help="agreement rate of two checkpoints")
    ag.add_argument("--checkpoint", type=Path, nargs=2, required=True, metavar=("A", "B"))
    ag.add_argument("--manifest", type=Path)
    sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    return p


def _config_for(args) -> ExperimentConfig:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    cfg = load_config(args.config, profile=args.profile, overrides=overrides)
    if args.command == "synth" and args.seed is not None and cfg.dataset.synth is not None:
        cfg = replace(cfg, dataset=replace(cfg.dataset,
                                           synth=replace(cfg.dataset.synth, seed=args.seed)))
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_for(args)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "train":
            result = cmd_train(cfg)
        elif args.command == "adapt":
            result = cmd_adapt(cfg, args.checkpoint, args.manifest)
        elif args.command == "eval":
            result = cmd_eval(cfg, args.checkpoint, args.manifest, args.refine)
        elif args.command == "agree":
            result = cmd_agree(cfg, *args.checkpoint, args.manifest)
        else:
            result = cmd_synth(cfg)
    except AmautError as exc:
        print(f"amaut {args.command}: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
