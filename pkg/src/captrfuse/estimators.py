"""scikit-learn style wrappers around the two training phases.

``CaptionTransformer`` learns image -> caption and ``transform`` returns the
decoded descriptions. ``FusionSentimentClassifier`` takes a fitted
captioner and learns target sentiment from (sentence, target, image) samples.
Both support ``get_params``/``set_params``/``clone``.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .captioner import decode_caption
from .data import SENTIMENT_LABELS, CaptionPair
from .fusion import FusionMode
from .tensor import Tensor
from .text import Vocabulary, detokenize
from .training import (
    TrainConfig,
    build_inputs,
    caption_token_accuracy,
    decode_all,
    predict_inputs,
    pretrain_captioner,
    train_classifier,
)
from .validation import check_captions, check_images, check_samples


class CaptionTransformer(TransformerMixin, BaseEstimator):
    """Non-autoregressive image captioner (phase 1).

    Parameters
    ----------
    vocabulary : Vocabulary, optional
        Shared vocabulary. Built from the training captions when omitted;
        pass one that also covers sentence words when the captioner feeds a
        :class:`FusionSentimentClassifier`.
    max_steps : int, optional
        Stop after this many optimiser updates.
    """

    def __init__(self, d_model=32, num_heads=4, num_layers=1, max_length=8, learning_rate=1e-3,
                 batch_size=4, epochs=100, max_steps=None, weight_decay=0.01, dropout=0.1,
                 vocabulary=None, random_state=0):
        self.d_model = d_model
        self.num_heads = num_heads
        self.num_layers = num_layers
        self.max_length = max_length
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.vocabulary = vocabulary
        self.random_state = random_state

    def _config(self, image_size):
        return TrainConfig(
            caption_d_model=self.d_model, num_heads=self.num_heads, caption_layers=self.num_layers,
            caption_length=self.max_length, caption_learning_rate=self.learning_rate,
            caption_batch_size=self.batch_size, caption_epochs=self.epochs,
            weight_decay=self.weight_decay, dropout=self.dropout, seed=self.random_state,
            image_size=image_size,
        )

    def fit(self, X, y):
        images = check_images(X)
        captions = check_captions(y, len(images))
        self.vocab_ = self.vocabulary if self.vocabulary is not None else Vocabulary.from_texts(captions)
        pairs = [CaptionPair(img, cap) for img, cap in zip(images, captions)]
        cfg = self._config(images.shape[2])
        self.checkpoint_, self.model_, self.loss_curve_ = pretrain_captioner(
            pairs, self.vocab_, cfg, steps=self.max_steps
        )
        self.n_steps_ = len(self.loss_curve_)
        return self

    def decode_ids(self, X):
        check_is_fitted(self, "model_")
        return [decode_caption(Tensor(img), self.model_, self.vocab_) for img in check_images(X)]

    def transform(self, X):
        """Decoded caption text per image."""
        return np.array([detokenize(ids, self.vocab_) for ids in self.decode_ids(X)], dtype=object)

    def score(self, X, y):
        """Per-token accuracy over supervised caption positions."""
        check_is_fitted(self, "model_")
        images = check_images(X)
        pairs = [CaptionPair(img, cap) for img, cap in zip(images, check_captions(y, len(images)))]
        return caption_token_accuracy(self.model_, pairs, self.vocab_)

    @classmethod
    def from_checkpoint(cls, ckpt):
        model = ckpt.captioner()
        c = model.config
        est = cls(d_model=c.d_model, num_heads=c.num_heads, num_layers=c.encoder_layers,
                  max_length=c.max_length, vocabulary=ckpt.vocabulary())
        est.vocab_, est.model_, est.checkpoint_, est.loss_curve_ = ckpt.vocabulary(), model, ckpt, []
        return est


class FusionSentimentClassifier(ClassifierMixin, BaseEstimator):
    """Sentence-pair classifier fed by a frozen captioner (phase 2).

    ``X`` is a sequence of :class:`~captrfuse.data.MultimodalSample` (or
    dicts with ``sentence``, ``target_start``, ``target_end``, ``image``).
    ``mode`` is ``"EF"`` (auxiliary sentence), ``"LF"`` (separate encodings)
    or ``"PairQA"`` (one binary question per label).
    """

    def __init__(self, captioner=None, mode="EF", learning_rate=5e-5, batch_size=16, epochs=6,
                 max_length=80, pooler_dropout=0.1, dropout=0.1, d_model=64, num_layers=2,
                 num_heads=4, weight_decay=0.01, labels=SENTIMENT_LABELS, random_state=0):
        self.captioner = captioner
        self.mode = mode
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_length = max_length
        self.pooler_dropout = pooler_dropout
        self.dropout = dropout
        self.d_model = d_model
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.weight_decay = weight_decay
        self.labels = labels
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
            max_length=self.max_length, pooler_dropout=self.pooler_dropout, dropout=self.dropout,
            d_model=self.d_model, num_layers=self.num_layers, num_heads=self.num_heads,
            weight_decay=self.weight_decay, labels=tuple(self.labels), seed=self.random_state,
        )

    def fit(self, X, y):
        if self.captioner is None:
            raise ValueError("a fitted CaptionTransformer is required")
        check_is_fitted(self.captioner, "model_")
        labels = tuple(self.labels)
        unknown = sorted(set(map(str, y)) - set(labels))
        if unknown:
            raise ValueError(f"labels {unknown} not in {labels}")
        samples = check_samples(X, y, labels)
        run = train_classifier(samples, self.captioner.checkpoint_, self._config(), FusionMode(self.mode))
        self.model_ = run.model
        self.checkpoint_ = run.checkpoint
        self.loss_curve_ = run.history
        self.epoch_metrics_ = run.epoch_metrics
        self.classes_ = np.array(labels, dtype=object)
        return self

    def _predict_raw(self, X):
        check_is_fitted(self, "model_")
        samples = check_samples(X, labels=tuple(self.labels))
        vocab = self.captioner.vocab_
        captions = decode_all(samples, self.captioner.model_, vocab)
        inputs = build_inputs(samples, captions, self.model_.mode, vocab, self.max_length, tuple(self.labels))
        return predict_inputs(self.model_, inputs), captions

    def predict_proba(self, X):
        """Class probabilities; for PairQA the "yes" confidences normalised to sum 1."""
        raw, _ = self._predict_raw(X)
        return np.array([probs for _, probs, _ in raw])

    def predict(self, X):
        raw, _ = self._predict_raw(X)
        return self.classes_[[pred for pred, _, _ in raw]]
