"""Desk-scale experiments: early vs late fusion, and PairQA calibration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SyntheticSpec, generate_synthetic, synthetic_vocabulary, text_only_bayes_accuracy
from .fusion import FusionMode
from .metrics import PredictionRecord, accuracy, calibration_report
from .training import (
    TrainConfig,
    build_inputs,
    decode_all,
    predict_inputs,
    pretrain_captioner,
    train_classifier,
)


def experiment_config(seed=0, **overrides):
    """Toy-scale settings under which the encoder learns the joint rule from scratch."""
    base = dict(
        max_length=16, learning_rate=2e-3, epochs=15, batch_size=16, dropout=0.0,
        pooler_dropout=0.0, d_model=64, num_layers=2, num_heads=4, seed=seed,
        caption_epochs=30,
    )
    base.update(overrides)
    return TrainConfig(**base)


def pretrain_synthetic_captioner(seed=0, config=None, spec=None):
    """Phase-1 checkpoint on the synthetic caption pairs of ``seed``."""
    config = config or experiment_config(seed)
    captions, _, _ = generate_synthetic(seed, spec)
    ckpt, model, history = pretrain_captioner(captions, synthetic_vocabulary(), config)
    return ckpt, model, history


def evaluate_model(model, samples, captioner, vocab, labels):
    """One :class:`PredictionRecord` per sample, captions decoded by ``captioner``."""
    captions = decode_all(samples, captioner, vocab)
    inputs = build_inputs(samples, captions, model.mode, vocab, model.encoder.config.max_length, labels)
    records = []
    for i, ((pred, probs, conf), (_, y), cap) in enumerate(zip(predict_inputs(model, inputs), inputs, captions)):
        records.append(PredictionRecord(i, y, pred, tuple(probs), len(cap), model.mode.value, conf))
    return records


def evaluate_run(run, samples, captioner, vocab, labels):
    return evaluate_model(run.model, samples, captioner, vocab, labels)


@dataclass
class FusionComparison:
    ef: list
    lf: list
    text_only_bayes: float

    @property
    def ef_mean(self):
        return float(np.mean(self.ef))

    @property
    def lf_mean(self):
        return float(np.mean(self.lf))


def compare_fusion(seeds=range(5), spec=None, config_overrides=None, captioner_ckpt=None):
    """Train EF and LF on identical data per seed; report held-out accuracies.

    The captioner is pretrained once and shared: every seed draws from the
    same image-to-word mapping.
    """
    spec = spec or SyntheticSpec(n_train=128)
    overrides = config_overrides or {}
    if captioner_ckpt is None:
        captioner_ckpt, _, _ = pretrain_synthetic_captioner(0, experiment_config(0, **overrides), spec)
    vocab = captioner_ckpt.vocabulary()
    captioner = captioner_ckpt.captioner()
    ef, lf = [], []
    for seed in seeds:
        _, train, test = generate_synthetic(seed, spec)
        cfg = experiment_config(seed, **overrides)
        train_caps = decode_all(train, captioner, vocab)
        for mode, sink in ((FusionMode.EF, ef), (FusionMode.LF, lf)):
            run = train_classifier(train, captioner_ckpt, cfg, mode, captions=train_caps)
            sink.append(accuracy(evaluate_run(run, test, captioner, vocab, cfg.labels)))
    return FusionComparison(ef, lf, text_only_bayes_accuracy())


@dataclass
class CalibrationResult:
    ece: float
    ece_sharpened: float
    accuracy: float
    passes_per_sample: float
    records: list
    records_sharpened: list


def pair_qa_calibration(seed=0, temperature=0.25, spec=None, config_overrides=None, captioner_ckpt=None,
                        n_bins=10):
    """Train a PairQA classifier, then compare ECE before and after dividing
    its binary logits by ``temperature`` (< 1 sharpens) on the same test set."""
    spec = spec or SyntheticSpec()
    overrides = dict(config_overrides or {})
    overrides.setdefault("epochs", 6)
    cfg = experiment_config(seed, **overrides)
    if captioner_ckpt is None:
        captioner_ckpt, _, _ = pretrain_synthetic_captioner(seed, cfg, spec)
    vocab = captioner_ckpt.vocabulary()
    captioner = captioner_ckpt.captioner()
    _, train, test = generate_synthetic(seed, spec)
    run = train_classifier(train, captioner_ckpt, cfg, FusionMode.PAIR_QA)
    run.model.encoder.reset_counters()
    records = evaluate_run(run, test, captioner, vocab, cfg.labels)
    passes = run.model.encoder.passes / len(test)
    ece, _ = calibration_report(records, n_bins)
    head = run.model.head
    run.model.head = head.sharpened(temperature)
    sharp = evaluate_run(run, test, captioner, vocab, cfg.labels)
    run.model.head = head
    ece_sharp, _ = calibration_report(sharp, n_bins)
    return CalibrationResult(ece, ece_sharp, accuracy(records), passes, records, sharp)


def caption_lengths(samples, captioner, vocab):
    return [len(c) for c in decode_all(samples, captioner, vocab)]


__all__ = [
    "CalibrationResult",
    "FusionComparison",
    "caption_lengths",
    "compare_fusion",
    "evaluate_model",
    "evaluate_run",
    "experiment_config",
    "pair_qa_calibration",
    "pretrain_synthetic_captioner",
]
