"""Image-to-token translation in a single forward pass.

A small strided conv backbone feeds a 1x1 projection whose output is
flattened into a ``d x HW`` memory. An encoder stack refines the memory, a
decoder stack turns the fixed prompt ``[CLS], [PAD], ...`` into ``l`` vectors
that attend to it, and a three-layer ReLU head maps each position to
vocabulary logits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import (
    DecoderLayerParams,
    EncoderLayerParams,
    decoder_layer_forward,
    encoder_layer_forward,
    sinusoidal_positions,
)
from .nn import Module, uniform, zeros
from .tensor import ShapeError, Tensor, get_dtype, no_grad


@dataclass
class CaptionerConfig:
    vocab_size: int
    d_model: int = 32
    num_heads: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 1
    max_length: int = 8
    image_size: int = 16
    channels: tuple = (16, 32, 32)
    dropout: float = 0.1

    def to_dict(self):
        out = asdict(self)
        out["channels"] = list(self.channels)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["channels"] = tuple(data.get("channels", (16, 32, 32)))
        return cls(**data)


class BackboneParams(Module):
    """Stride-2 3x3 conv blocks (one per entry of ``channels``) then a 1x1 projection to the model width."""

    def __init__(self, channels, d_model, rng):
        self.convs = []
        c_in = 3
        for c_out in channels:
            self.convs.append(_Conv(c_in, c_out, 3, rng))
            c_in = c_out
        self.proj = _Conv(c_in, d_model, 1, rng)


class _Conv(Module):
    def __init__(self, c_in, c_out, k, rng):
        self.weight = uniform(rng, (c_out, c_in, k, k), c_in * k * k)
        self.bias = zeros((c_out,))


class CaptionHeadParams(Module):
    def __init__(self, d_model, vocab_size, rng, d_hidden=None):
        d_hidden = d_hidden or d_model
        self.w1 = uniform(rng, (d_hidden, d_model), d_model)
        self.w2 = uniform(rng, (d_hidden, d_hidden), d_hidden)
        self.w3 = uniform(rng, (vocab_size, d_hidden), d_hidden)


def backbone_forward(image, params):
    """3 x H0 x W0 image -> d x (H0/s * W0/s) memory, flattened row-major; s = 2 ** len(convs)."""
    image = T.as_tensor(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a 3 x H x W image, got {image.shape}")
    h0, w0 = image.shape[1:]
    stride = 2 ** len(params.convs)
    if h0 % stride or w0 % stride:
        raise ShapeError(f"image size {h0}x{w0} not divisible by backbone stride {stride}")
    x = image
    for conv in params.convs:
        x = T.relu(T.conv2d(x, conv.weight, conv.bias, stride=2, padding=1))
    x = T.conv2d(x, params.proj.weight, params.proj.bias)
    d, h, w = x.shape
    return T.reshape(x, (d, h * w))


def build_prompt(length, vocab=None):
    """[CLS] followed by ``length - 1`` zeros (the [PAD] id)."""
    if length < 2:
        raise ValueError(f"prompt length must be at least 2, got {length}")
    prompt = np.zeros(length, dtype=np.int64)
    prompt[0] = 1 if vocab is None else vocab.cls_id
    return prompt


def caption_head(decoded, head):
    """d x l decoder output -> raw l x V logits via W3 R(W2 R(W1 x))."""
    h = T.relu(T.matmul(head.w1, decoded))
    h = T.relu(T.matmul(head.w2, h))
    return T.transpose(T.matmul(head.w3, h))


def caption_mask(gold, pad_id=0):
    """Positions that carry a training target: not the control slot, not [PAD]."""
    gold = np.asarray(gold)
    mask = gold != pad_id
    mask[0] = False
    return mask


def caption_loss(logits, gold, pad_id=0):
    gold = np.asarray(gold, dtype=np.int64)
    if gold.shape[0] != logits.shape[0]:
        raise ShapeError(f"gold length {gold.shape[0]} != logits length {logits.shape[0]}")
    return T.masked_cross_entropy(logits, gold, caption_mask(gold, pad_id))


def caption_targets(ids, length, vocab=None):
    """Gold row for a caption: [CLS] tokens [SEP] [PAD]..., cut to ``length``.

    [SEP] marks the end of the description so decoding knows where to stop.
    """
    cls_id, sep_id = (1, 2) if vocab is None else (vocab.cls_id, vocab.sep_id)
    body = list(ids)[: length - 2] + [sep_id]
    row = np.zeros(length, dtype=np.int64)
    row[0] = cls_id
    row[1 : 1 + len(body)] = body
    return row


class CaptionModel(Module):
    """Backbone, encoder and decoder stacks, prompt embedding and vocabulary head."""

    def __init__(self, config, rng):
        self._config = config
        c = config
        self.backbone = BackboneParams(c.channels, c.d_model, rng)
        self.encoder = [
            EncoderLayerParams(c.d_model, c.num_heads, rng, dropout=c.dropout)
            for _ in range(c.encoder_layers)
        ]
        self.token_embedding = uniform(rng, (c.vocab_size, c.d_model), c.d_model)
        self.decoder = [
            DecoderLayerParams(c.d_model, c.num_heads, rng, dropout=c.dropout)
            for _ in range(c.decoder_layers)
        ]
        self.head = CaptionHeadParams(c.d_model, c.vocab_size, rng)
        self._encoder_passes = 0
        self._decoder_passes = 0

    @property
    def config(self):
        return self._config

    @property
    def pass_counts(self):
        return {"encoder": self._encoder_passes, "decoder": self._decoder_passes}

    def reset_counters(self):
        self._encoder_passes = self._decoder_passes = 0

    def encode(self, image, training=False, rng=None):
        self._encoder_passes += 1
        memory = backbone_forward(image, self.backbone)
        stride = 2 ** len(self.backbone.convs)
        grid = (image.shape[1] // stride, image.shape[2] // stride)
        pos = sinusoidal_positions(self._config.d_model, grid)
        for layer in self.encoder:
            memory = encoder_layer_forward(memory, pos, layer, training=training, rng=rng)
        return memory, pos

    def decode(self, memory, p_mem, training=False, rng=None):
        self._decoder_passes += 1
        length = self._config.max_length
        prompt = build_prompt(length)
        p_dec = sinusoidal_positions(self._config.d_model, length)
        x = T.add(T.transpose(T.embedding(self.token_embedding, prompt)), p_dec)
        for layer in self.decoder:
            x = decoder_layer_forward(x, memory, p_dec, p_mem, layer, training=training, rng=rng)
        return x

    def forward(self, image, training=False, rng=None):
        """Logits (l x V) for every prompt position from one encoder+decoder pass."""
        memory, p_mem = self.encode(image, training, rng)
        return caption_head(self.decode(memory, p_mem, training, rng), self.head)


def decode_caption(image, model, vocab=None):
    """Argmax tokens at positions 1..l-1, cut at the first [PAD] or [SEP].

    Exact logit ties resolve to the lowest token id.
    """
    pad_id, sep_id = (0, 2) if vocab is None else (vocab.pad_id, vocab.sep_id)
    with no_grad():
        logits = model.forward(image, training=False)
    best = np.argmax(logits.data[1:], axis=1)
    out = []
    for tok in best:
        if tok in (pad_id, sep_id):
            break
        out.append(int(tok))
    return out


def as_image(array):
    arr = np.asarray(array, dtype=get_dtype())
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"expected a 3 x H x W image, got {arr.shape}")
    return Tensor(arr)
