"""Two-phase training: caption pretraining, then fusion-classifier fine-tuning.

Phase 1 updates only the captioner (backbone, attention layers, vocabulary
head). Phase 2 freezes the captioner, decodes every image once, and updates
only the language encoder and the linear head.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .captioner import CaptionerConfig, CaptionModel, caption_loss, caption_mask, caption_targets, decode_caption
from .data import RELATION_LABELS, SENTIMENT_LABELS
from .fusion import (
    ClassifierHead,
    EncoderConfig,
    FusionMode,
    LanguageEncoderParams,
    classify,
    ef_logits,
    encode_pair,
    ef_pair,
    lf_logits,
    lf_pairs,
    pair_qa_decide,
    pair_qa_pairs,
)
from .nn import Module
from .serialization import TensorFormatError, load_ten, save_ten
from .text import Vocabulary, tokenize

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid training configuration or input data."""


class CheckpointError(RuntimeError):
    """A checkpoint directory is missing, incomplete or inconsistent."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class TrainConfig:
    # phase 2 (classifier fine-tuning)
    learning_rate: float = 5e-5
    batch_size: int = 16
    epochs: int = 6
    max_length: int = 80
    pooler_dropout: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    labels: tuple = SENTIMENT_LABELS
    # phase 1 (caption pretraining)
    caption_learning_rate: float = 1e-3
    caption_batch_size: int = 4
    caption_epochs: int = 100
    caption_length: int = 8
    # toy model dimensions
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    dropout: float = 0.1
    caption_d_model: int = 32
    caption_layers: int = 1
    image_size: int = 16

    def __post_init__(self):
        self.labels = tuple(self.labels)
        self.validate()

    def validate(self):
        positive = (
            "learning_rate", "batch_size", "epochs", "max_length", "caption_learning_rate",
            "caption_batch_size", "caption_epochs", "caption_length", "d_model",
            "num_layers", "num_heads", "caption_d_model", "caption_layers", "image_size",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("pooler_dropout", "dropout"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.max_length < 4 or self.caption_length < 2:
            raise ConfigError("max_length must be >= 4 and caption_length >= 2")
        if len(self.labels) < 2:
            raise ConfigError("need at least two labels")

    def to_dict(self):
        out = asdict(self)
        out["labels"] = list(self.labels)
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None

    def total_steps(self, n_samples):
        return math.ceil(n_samples / self.batch_size) * self.epochs

    def captioner_config(self, vocab_size):
        return CaptionerConfig(
            vocab_size=vocab_size,
            d_model=self.caption_d_model,
            num_heads=self.num_heads,
            encoder_layers=self.caption_layers,
            decoder_layers=self.caption_layers,
            max_length=self.caption_length,
            image_size=self.image_size,
            dropout=self.dropout,
        )

    def encoder_config(self, vocab_size):
        return EncoderConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            num_heads=self.num_heads,
            num_layers=self.num_layers,
            max_length=self.max_length,
            dropout=self.dropout,
            pooler_dropout=self.pooler_dropout,
        )


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params, grads, state, lr, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
    """One AdamW update in place, with bias correction and decoupled decay."""
    state.t += 1
    c1 = 1 - beta1**state.t
    c2 = 1 - beta2**state.t
    for i, p in enumerate(params):
        g = grads[i]
        if g is None:
            g = np.zeros_like(p.data)
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        p.data -= (lr * (update + weight_decay * p.data)).astype(p.data.dtype)


def lr_schedule(step, total_steps, base_lr):
    """Linear decay from ``base_lr`` to 0 over ``total_steps``; no warm-up."""
    if total_steps <= 0:
        return 0.0
    return base_lr * max(0.0, 1.0 - step / total_steps)


# ---------------------------------------------------------------------------
# models and checkpoints


class FusionClassifierModel(Module):
    """Language encoder plus the head that matches the fusion mode."""

    def __init__(self, config, mode, num_classes, rng):
        self._mode = FusionMode(mode)
        self.encoder = LanguageEncoderParams(config, rng)
        d_in = 2 * config.d_model if self._mode is FusionMode.LF else config.d_model
        k = 2 if self._mode is FusionMode.PAIR_QA else num_classes
        self.head = ClassifierHead(k, d_in, rng, dropout=config.pooler_dropout)

    @property
    def mode(self):
        return self._mode


PARAM_GROUPS = {
    "captioner.backbone": "theta_ResNet",
    "captioner.encoder": "theta_DETRLayer",
    "captioner.decoder": "theta_DETRLayer",
    "captioner.token_embedding": "theta_DETRLayer",
    "captioner.head": "theta_FFN",
    "classifier.encoder": "theta_BERT",
    "classifier.head": "theta_Linear",
}


def param_group(name):
    for prefix, group in PARAM_GROUPS.items():
        if name == prefix or name.startswith(prefix + "."):
            return group
    raise KeyError(name)


@dataclass
class Checkpoint:
    """Named parameters, config manifest and phase tag."""

    phase: str
    params: dict
    config: dict
    vocab: list
    meta: dict = field(default_factory=dict)

    def groups(self):
        return sorted({param_group(n) for n in self.params})

    def vocabulary(self):
        return Vocabulary(self.vocab[4:])

    def captioner(self):
        cfg = CaptionerConfig.from_dict(self.config["captioner"])
        model = CaptionModel(cfg, np.random.default_rng(0))
        _load_prefixed(model, self.params, "captioner.")
        return model

    def classifier(self):
        if "classifier" not in self.config:
            raise CheckpointError("checkpoint has no classifier parameters")
        c = self.config["classifier"]
        enc_cfg = EncoderConfig.from_dict(c["encoder"])
        model = FusionClassifierModel(enc_cfg, c["mode"], c["num_classes"], np.random.default_rng(0))
        _load_prefixed(model, self.params, "classifier.")
        return model


def _load_prefixed(model, params, prefix):
    state = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match its manifest config: {exc}") from None


def make_checkpoint(phase, vocab, captioner, classifier=None, meta=None):
    params = {f"captioner.{k}": v for k, v in captioner.state_dict().items()}
    config = {"captioner": captioner.config.to_dict()}
    if classifier is not None:
        params.update({f"classifier.{k}": v for k, v in classifier.state_dict().items()})
        config["classifier"] = {
            "encoder": classifier.encoder.config.to_dict(),
            "mode": classifier.mode.value,
            "num_classes": int((meta or {}).get("num_classes", classifier.head.num_classes)),
        }
    return Checkpoint(phase, params, config, vocab.tokens, dict(meta or {}))


def save_checkpoint(ckpt, path):
    """Directory with ``manifest.json`` plus one ``.ten`` file per parameter."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for i, (name, arr) in enumerate(sorted(ckpt.params.items())):
        fname = f"p{i:04d}.ten"
        save_ten(path / fname, arr)
        entries[name] = {"file": fname, "shape": list(arr.shape), "group": param_group(name)}
    manifest = {
        "format": "captrfuse-checkpoint/1",
        "phase": ckpt.phase,
        "config": ckpt.config,
        "vocab": ckpt.vocab,
        "meta": ckpt.meta,
        "params": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path):
    path = Path(path)
    mfile = path / "manifest.json"
    if not mfile.is_file():
        raise CheckpointError(f"{path}: missing manifest.json")
    try:
        manifest = json.loads(mfile.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{mfile}: corrupt manifest ({exc})") from None
    params = {}
    for name, entry in manifest["params"].items():
        fpath = path / entry["file"]
        if not fpath.is_file():
            raise CheckpointError(f"{path}: tensor {name!r} missing ({entry['file']})")
        try:
            arr = load_ten(fpath)
        except TensorFormatError as exc:
            raise CheckpointError(f"{path}: tensor {name!r} is corrupt: {exc}") from None
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {list(arr.shape)}, manifest says {entry['shape']}"
            )
        params[name] = arr
    ckpt = Checkpoint(manifest["phase"], params, manifest["config"], manifest["vocab"], manifest.get("meta", {}))
    # rebuilding the modules validates config against stored shapes
    ckpt.captioner()
    if "classifier" in ckpt.config:
        ckpt.classifier()
    return ckpt


def param_hashes(module, prefix=""):
    """sha256 of each parameter buffer, keyed by dotted name."""
    return {
        prefix + name: hashlib.sha256(p.data.tobytes()).hexdigest()
        for name, p in module.named_parameters()
    }


# ---------------------------------------------------------------------------
# phase 1


def _check_finite(loss, phase, step):
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"{phase}: non-finite loss {value} at step {step}")
    return value


def pretrain_captioner(pairs, vocab, config, model=None, on_step=None, steps=None):
    """Minimise the masked caption loss over (image, caption) pairs.

    ``steps`` caps the number of optimiser updates (the schedule still spans
    ``caption_epochs`` worth of batches). ``on_step(step, loss)`` runs after
    every update. Returns ``(checkpoint, model, history)``.
    """
    if not pairs:
        raise ConfigError("caption dataset is empty")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = CaptionModel(config.captioner_config(len(vocab)), rng)
    length = model.config.max_length
    images = [T.as_tensor(p.image) for p in pairs]
    golds = [caption_targets(tokenize(p.caption, vocab), length, vocab) for p in pairs]
    params = model.parameters()
    state = AdamState.zeros_like(params)
    bs = config.caption_batch_size
    per_epoch = math.ceil(len(pairs) / bs)
    total = per_epoch * config.caption_epochs
    if steps is not None:
        total = min(total, steps)
    history = []
    step = 0
    while step < total:
        order = rng.permutation(len(pairs))
        for b in range(per_epoch):
            if step >= total:
                break
            batch = order[b * bs : (b + 1) * bs]
            model.zero_grad()
            loss = None
            for i in batch:
                li = caption_loss(model.forward(images[i], training=True, rng=rng), golds[i])
                loss = li if loss is None else T.add(loss, li)
            loss = T.scale(loss, 1.0 / len(batch))
            loss.backward()
            value = _check_finite(loss, "caption pretraining", step)
            lr = lr_schedule(step, total, config.caption_learning_rate)
            adamw_step(params, [p.grad for p in params], state, lr, config.weight_decay,
                       config.beta1, config.beta2, config.adam_eps)
            step += 1
            history.append(value)
            if on_step is not None:
                on_step(step, value)
        log.debug("caption epoch done at step %d, loss %.4f", step, history[-1])
    ckpt = make_checkpoint("captioner", vocab, model, meta={"steps": step})
    return ckpt, model, history


def caption_token_accuracy(model, pairs, vocab):
    """Fraction of supervised caption positions (tokens and end marker) predicted exactly."""
    length = model.config.max_length
    hit = total = 0
    with T.no_grad():
        for p in pairs:
            gold = caption_targets(tokenize(p.caption, vocab), length, vocab)
            mask = caption_mask(gold)
            pred = np.argmax(model.forward(T.as_tensor(p.image)).data, axis=1)
            hit += int((pred[mask] == gold[mask]).sum())
            total += int(mask.sum())
    return hit / total


# ---------------------------------------------------------------------------
# phase 2


def _nll(logits, y):
    return T.masked_cross_entropy(T.reshape(logits, (1, logits.shape[0])), [y], [True])


def decode_all(samples, captioner, vocab):
    return [decode_caption(T.as_tensor(s.image), captioner, vocab) for s in samples]


def build_inputs(samples, captions, mode, vocab, length, labels):
    """Encoder-ready inputs per sample, with the training target(s)."""
    mode = FusionMode(mode)
    out = []
    for s, cap in zip(samples, captions):
        y = labels.index(s.label) if s.label is not None else None
        if mode is FusionMode.EF:
            out.append((ef_pair(s, cap, vocab, length), y))
        elif mode is FusionMode.LF:
            out.append((lf_pairs(s, cap, vocab, length), y))
        else:
            out.append((pair_qa_pairs(s, vocab, length, labels), y))
    return out


def sample_loss(model, inputs, y, training=False, rng=None):
    """-log p(y | sample); PairQA sums the three binary losses."""
    mode, enc, head = model.mode, model.encoder, model.head
    if mode is FusionMode.EF:
        return _nll(ef_logits(inputs, enc, head, training, rng), y)
    if mode is FusionMode.LF:
        return _nll(lf_logits(inputs, enc, head, training, rng), y)
    loss = None
    for q, pair in enumerate(inputs):
        lq = _nll(ef_logits(pair, enc, head, training, rng), int(q == y))
        loss = lq if loss is None else T.add(loss, lq)
    return loss


def predict_inputs(model, inputs):
    """Eval-mode ``(pred, probs, confidence)`` for each prepared input."""
    mode, enc, head = model.mode, model.encoder, model.head
    out = []
    with T.no_grad():
        for x, _ in inputs:
            if mode is FusionMode.EF:
                probs = T.softmax(ef_logits(x, enc, head)).data.astype(np.float64)
            elif mode is FusionMode.LF:
                probs = T.softmax(lf_logits(x, enc, head)).data.astype(np.float64)
            else:
                conf = [float(classify(encode_pair(p, enc), head).data[1]) for p in x]
                pred = pair_qa_decide(conf)
                probs = np.asarray(conf) / max(sum(conf), 1e-12)
                out.append((pred, probs, conf[pred]))
                continue
            pred = int(np.argmax(probs))
            out.append((pred, probs, float(probs[pred])))
    return out


@dataclass
class ClassifierRun:
    checkpoint: Checkpoint
    model: FusionClassifierModel
    history: list
    epoch_metrics: list
    best_epoch: int


def train_classifier(samples, captioner_ckpt, config, mode=FusionMode.EF, val_samples=None,
                     on_step=None, captions=None):
    """Fine-tune encoder and head on top of a frozen captioner.

    ``captioner_ckpt`` is a phase-1 :class:`Checkpoint` (or a path to one).
    Captions are decoded once up front since the captioner never changes.
    When ``val_samples`` are given, the epoch with the best validation
    accuracy is kept; otherwise the final epoch.
    """
    from .metrics import accuracy_score_labels

    if captioner_ckpt is None:
        raise CheckpointError("phase 2 needs a captioner checkpoint")
    if not isinstance(captioner_ckpt, Checkpoint):
        captioner_ckpt = load_checkpoint(captioner_ckpt)
    if not samples:
        raise ConfigError("sentiment dataset is empty")
    mode = FusionMode(mode)
    labels = tuple(config.labels)
    vocab = captioner_ckpt.vocabulary()
    captioner = captioner_ckpt.captioner()
    rng = np.random.default_rng(config.seed)
    model = FusionClassifierModel(config.encoder_config(len(vocab)), mode, len(labels), rng)
    if captions is None:
        captions = decode_all(samples, captioner, vocab)
    inputs = build_inputs(samples, captions, mode, vocab, config.max_length, labels)
    val_inputs = None
    if val_samples:
        val_caps = decode_all(val_samples, captioner, vocab)
        val_inputs = build_inputs(val_samples, val_caps, mode, vocab, config.max_length, labels)

    params = model.parameters()
    state = AdamState.zeros_like(params)
    total = config.total_steps(len(samples))
    bs = config.batch_size
    history, epoch_metrics = [], []
    best = (-1.0, 0, model.state_dict())
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        for b in range(0, len(order), bs):
            batch = order[b : b + bs]
            model.zero_grad()
            loss = None
            for i in batch:
                li = sample_loss(model, inputs[i][0], inputs[i][1], training=True, rng=rng)
                loss = li if loss is None else T.add(loss, li)
            loss = T.scale(loss, 1.0 / len(batch))
            loss.backward()
            value = _check_finite(loss, "classifier training", step)
            lr = lr_schedule(step, total, config.learning_rate)
            adamw_step(params, [p.grad for p in params], state, lr, config.weight_decay,
                       config.beta1, config.beta2, config.adam_eps)
            step += 1
            history.append(value)
            if on_step is not None:
                on_step(step, value)
        train_acc = accuracy_score_labels([y for _, y in inputs], [p for p, _, _ in predict_inputs(model, inputs)])
        row = {"epoch": epoch + 1, "loss": history[-1], "train_accuracy": train_acc}
        score = train_acc
        if val_inputs is not None:
            row["val_accuracy"] = accuracy_score_labels(
                [y for _, y in val_inputs], [p for p, _, _ in predict_inputs(model, val_inputs)]
            )
            score = row["val_accuracy"]
        epoch_metrics.append(row)
        log.info("epoch %d: %s", epoch + 1, row)
        if val_inputs is None or score > best[0]:
            best = (score, epoch + 1, model.state_dict())
    if val_inputs is not None:
        model.load_state_dict(best[2])
    meta = {"num_classes": len(labels), "labels": list(labels), "best_epoch": best[1], "steps": step}
    ckpt = make_checkpoint("classifier", vocab, captioner, model, meta)
    return ClassifierRun(ckpt, model, history, epoch_metrics, best[1])


def relation_config(**overrides):
    """Config for the binary text/image relation task."""
    return TrainConfig(labels=RELATION_LABELS, **overrides)
