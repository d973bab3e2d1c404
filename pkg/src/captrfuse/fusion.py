"""Sentence-pair encoder, classification head and the three fusion modes.

EF puts the image description into the auxiliary sentence of a single pair.
LF encodes (sentence, target) and (caption, target) separately and
concatenates the pooled vectors. PairQA asks one binary question per label
and picks the most confident "yes".
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import EncoderLayerParams, encoder_layer_forward
from .captioner import decode_caption
from .data import SENTIMENT_LABELS, MultimodalSample  # noqa: F401
from .nn import Module, ones, uniform, zeros
from .tensor import ShapeError
from .text import build_aux_sentence, build_sentence_pair, tokenize

MASK_BIAS = -1e9


class FusionMode(str, enum.Enum):
    EF = "EF"
    LF = "LF"
    PAIR_QA = "PairQA"


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    num_heads: int = 4
    num_layers: int = 2
    max_length: int = 80
    dropout: float = 0.1
    pooler_dropout: float = 0.1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class LanguageEncoderParams(Module):
    """Token/segment/position embeddings, N self-attention layers, tanh pooler."""

    def __init__(self, config, rng):
        c = config
        self._config = c
        self.token_embedding = uniform(rng, (c.vocab_size, c.d_model), c.d_model)
        self.segment_embedding = uniform(rng, (2, c.d_model), c.d_model)
        self.position_embedding = uniform(rng, (c.max_length, c.d_model), c.d_model)
        self.embed_norm_gamma = ones((c.d_model,))
        self.embed_norm_beta = zeros((c.d_model,))
        self.layers = [
            EncoderLayerParams(c.d_model, c.num_heads, rng, dropout=c.dropout)
            for _ in range(c.num_layers)
        ]
        self.pooler_weight = uniform(rng, (c.d_model, c.d_model), c.d_model)
        self.pooler_bias = zeros((c.d_model, 1))
        self._passes = 0

    @property
    def config(self):
        return self._config

    @property
    def passes(self):
        return self._passes

    def reset_counters(self):
        self._passes = 0


class ClassifierHead(Module):
    """Linear map without bias; ``temperature`` only rescales logits at inference."""

    def __init__(self, num_classes, d_in, rng, dropout=0.1, temperature=1.0):
        self.weight = uniform(rng, (num_classes, d_in), d_in)
        self._dropout = dropout
        self._temperature = temperature

    @property
    def num_classes(self):
        return self.weight.shape[0]

    @property
    def temperature(self):
        return self._temperature

    def sharpened(self, temperature):
        """Copy sharing the same weight tensor but dividing logits by ``temperature``."""
        clone = object.__new__(ClassifierHead)
        clone.weight = self.weight
        clone._dropout = self._dropout
        clone._temperature = temperature
        return clone


def encode_pair(pair, params, training=False, rng=None):
    """Pooled [CLS] vector (length d) of a sentence-pair encoding.

    [PAD] positions are removed from every attention softmax through a large
    negative key bias, so their token ids cannot influence the result.
    """
    length = params.config.max_length
    if len(pair.ids) != length:
        raise ShapeError(f"pair length {len(pair.ids)} != encoder length {length}")
    params._passes += 1
    x = T.add(
        T.add(T.embedding(params.token_embedding, pair.ids), T.embedding(params.segment_embedding, pair.segments)),
        params.position_embedding,
    )
    x = T.layer_norm(x, params.embed_norm_gamma, params.embed_norm_beta)
    x = T.dropout(T.transpose(x), params.config.dropout, training, rng)
    bias = np.where(np.asarray(pair.mask)[None, :] > 0, 0.0, MASK_BIAS).astype(x.dtype)
    bias = T.Tensor(bias, dtype=x.dtype)
    for layer in params.layers:
        x = encoder_layer_forward(x, None, layer, key_bias=bias, training=training, rng=rng)
    first = T.getitem(x, (slice(None), slice(0, 1)))
    pooled = T.tanh(T.add(T.matmul(params.pooler_weight, first), params.pooler_bias))
    return T.reshape(pooled, (pooled.shape[0],))


def classifier_logits(h, head, training=False, rng=None):
    h = T.dropout(h, head._dropout, training, rng)
    logits = T.reshape(T.matmul(head.weight, T.reshape(h, (h.shape[0], 1))), (head.num_classes,))
    if head.temperature != 1.0:
        logits = T.scale(logits, 1.0 / head.temperature)
    return logits


def classify(h, head, training=False, rng=None):
    """softmax(theta dropout(h)); dropout only acts in training mode."""
    return T.softmax(classifier_logits(h, head, training, rng))


def target_ids(sample, vocab):
    return tokenize(sample.target, vocab)


def ef_pair(sample, caption_ids, vocab, length):
    aux = build_aux_sentence(target_ids(sample, vocab), caption_ids)
    return build_sentence_pair(tokenize(sample.sentence, vocab), aux, length, vocab)


def lf_pairs(sample, caption_ids, vocab, length):
    target = target_ids(sample, vocab)
    return (
        build_sentence_pair(tokenize(sample.sentence, vocab), target, length, vocab),
        build_sentence_pair(caption_ids, target, length, vocab),
    )


def pair_qa_pairs(sample, vocab, length, labels=SENTIMENT_LABELS):
    sentence = tokenize(sample.sentence, vocab)
    target = target_ids(sample, vocab)
    return [
        build_sentence_pair(sentence, tokenize(label, vocab) + target, length, vocab)
        for label in labels
    ]


def ef_logits(pair, encoder, head, training=False, rng=None):
    return classifier_logits(encode_pair(pair, encoder, training, rng), head, training, rng)


def lf_logits(pairs, encoder, head, training=False, rng=None):
    h1 = encode_pair(pairs[0], encoder, training, rng)
    h2 = encode_pair(pairs[1], encoder, training, rng)
    return classifier_logits(T.concat([h1, h2], axis=0), head, training, rng)


def ef_forward(sample, captioner, encoder, head, vocab, caption_ids=None):
    """Caption the image, build target+caption auxiliary sentence, classify the pair."""
    if caption_ids is None:
        caption_ids = decode_caption(T.as_tensor(sample.image), captioner, vocab)
    pair = ef_pair(sample, caption_ids, vocab, encoder.config.max_length)
    with T.no_grad():
        return classify(encode_pair(pair, encoder), head)


def lf_forward(sample, captioner, encoder, head_lf, vocab, caption_ids=None):
    """Tweet encoding first, caption encoding second, one linear head over both."""
    if head_lf.weight.shape[1] != 2 * encoder.config.d_model:
        raise ShapeError(
            f"late-fusion head expects {2 * encoder.config.d_model} inputs, has {head_lf.weight.shape[1]}"
        )
    if caption_ids is None:
        caption_ids = decode_caption(T.as_tensor(sample.image), captioner, vocab)
    pairs = lf_pairs(sample, caption_ids, vocab, encoder.config.max_length)
    with T.no_grad():
        return T.softmax(lf_logits(pairs, encoder, head_lf))


def pair_qa_predict(sample, encoder, binary_head, vocab, labels=SENTIMENT_LABELS):
    """One binary pass per label query; prediction is the most confident "yes".

    Returns ``(label index, confidences)``. Ties go to the lowest label index.
    """
    if binary_head.num_classes != 2:
        raise ShapeError("PairQA needs a two-class head")
    confidences = []
    with T.no_grad():
        for pair in pair_qa_pairs(sample, vocab, encoder.config.max_length, labels):
            probs = classify(encode_pair(pair, encoder), binary_head)
            confidences.append(float(probs.data[1]))
    return pair_qa_decide(confidences), confidences


def pair_qa_decide(confidences):
    return int(np.argmax(np.asarray(confidences)))
