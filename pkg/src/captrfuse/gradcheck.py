"""Finite-difference gradient suites for every parameterised component.

All checks run in float64 with dropout disabled, central differences at
``eps=1e-4`` and relative tolerance ``1e-4``.
"""

import numpy as np

from . import tensor as T
from .attention import (
    AttentionBlock,
    DecoderLayerParams,
    EncoderLayerParams,
    decoder_layer_forward,
    encoder_layer_forward,
    multi_head,
    sinusoidal_positions,
)
from .captioner import CaptionerConfig, CaptionModel, caption_loss, caption_targets
from .fusion import (
    ClassifierHead,
    EncoderConfig,
    LanguageEncoderParams,
    classifier_logits,
    ef_logits,
    encode_pair,
    lf_logits,
)
from .tensor import Tensor, grad_check, precision
from .text import build_sentence_pair

EPS = 1e-4
TOL = 1e-4


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _scalar_nll(logits, y):
    return T.masked_cross_entropy(T.reshape(logits, (1, logits.shape[0])), [y], [True])


def _jitter_zero_params(module, rng, scale=0.1):
    """Move zero-initialised biases off 0 so no ReLU input sits exactly on its kink."""
    for name, p in module.named_parameters():
        if name.endswith("bias") or name.endswith("b1") or name.endswith("b2"):
            p.data[...] = rng.normal(scale=scale, size=p.shape)


def tensor_suite(seed=0):
    """Each primitive composed into a scalar."""
    rng = np.random.default_rng(seed)
    out = []
    with precision("f64"):
        w, x = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
        out.append(("matmul |Wx|^2", grad_check(lambda p: T.sum(T.mul(p[0] @ p[1], p[0] @ p[1])), [w, x], EPS, TOL)))

        a = _leaf(rng, (3, 5))
        c = Tensor(rng.normal(size=(3, 5)))
        out.append(("softmax", grad_check(lambda p: T.sum(T.mul(T.softmax(p[0], axis=1), c)), [a], EPS, TOL)))
        out.append(("log_softmax", grad_check(lambda p: T.sum(T.mul(T.log_softmax(p[0], axis=0), c)), [a], EPS, TOL)))

        g, b = _leaf(rng, (5,)), _leaf(rng, (5,))
        out.append(("layer_norm", grad_check(
            lambda p: T.sum(T.mul(T.layer_norm(p[0], p[1], p[2]), c)), [a, g, b], EPS, TOL)))
        g0, b0 = _leaf(rng, (3,)), _leaf(rng, (3,))
        out.append(("layer_norm axis0", grad_check(
            lambda p: T.sum(T.mul(T.layer_norm(p[0], p[1], p[2], axis=0), c)), [a, g0, b0], EPS, TOL)))

        out.append(("relu", grad_check(lambda p: T.sum(T.mul(T.relu(p[0]), c)), [a], EPS, TOL)))
        out.append(("tanh", grad_check(lambda p: T.sum(T.mul(T.tanh(p[0]), c)), [a], EPS, TOL)))

        targets = rng.integers(0, 5, size=3)
        mask = np.array([True, False, True])
        out.append(("masked_cross_entropy", grad_check(
            lambda p: T.masked_cross_entropy(p[0], targets, mask), [a], EPS, TOL)))

        e = _leaf(rng, (6, 3))
        ids = np.array([0, 2, 2, 5])
        c2 = Tensor(rng.normal(size=(4, 3)))
        out.append(("embedding", grad_check(lambda p: T.sum(T.mul(T.embedding(p[0], ids), c2)), [e], EPS, TOL)))

        u, v = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
        out.append(("concat/transpose/mean", grad_check(
            lambda p: T.mean(T.mul(T.transpose(T.concat([p[0], p[1]], axis=0)), T.transpose(T.concat([p[1], p[0]], axis=0)))),
            [u, v], EPS, TOL)))
        out.append(("add/sub/scale", grad_check(
            lambda p: T.sum(T.mul(T.scale(T.sub(T.add(p[0], p[1]), T.mul(p[0], p[1])), 0.5), p[0])), [u, v], EPS, TOL)))

        img = _leaf(rng, (2, 6, 6))
        cw, cb = _leaf(rng, (3, 2, 3, 3)), _leaf(rng, (3,))
        c3 = Tensor(rng.normal(size=(3, 3, 3)))
        out.append(("conv2d", grad_check(
            lambda p: T.sum(T.mul(T.conv2d(p[0], p[1], p[2], stride=2, padding=1), c3)), [img, cw, cb], EPS, TOL)))
    return out


def attention_suite(seed=0, d=8, heads=2):
    rng = np.random.default_rng(seed)
    out = []
    with precision("f64"):
        xq, xkv = _leaf(rng, (d, 3)), _leaf(rng, (d, 5))
        pq, pkv = sinusoidal_positions(d, 3), sinusoidal_positions(d, 5)
        block = AttentionBlock(d, heads, rng, dropout=0.0)
        c = Tensor(rng.normal(size=(d, 3)))
        out.append(("multi_head", grad_check(
            lambda p: T.sum(T.mul(multi_head(p[-2], p[-1], block, pq, pkv), c)),
            block.parameters() + [xq, xkv], EPS, TOL)))

        enc = EncoderLayerParams(d, heads, rng, dropout=0.0)
        c5 = Tensor(rng.normal(size=(d, 5)))
        out.append(("encoder_layer", grad_check(
            lambda p: T.sum(T.mul(encoder_layer_forward(p[-1], pkv, enc), c5)),
            enc.parameters() + [xkv], EPS, TOL)))

        dec = DecoderLayerParams(d, heads, rng, dropout=0.0)
        out.append(("decoder_layer", grad_check(
            lambda p: T.sum(T.mul(decoder_layer_forward(p[-2], p[-1], pq, pkv, dec), c)),
            dec.parameters() + [xq, xkv], EPS, TOL)))

        stack = [EncoderLayerParams(d, heads, rng, dropout=0.0) for _ in range(2)]
        dec2 = DecoderLayerParams(d, heads, rng, dropout=0.0)
        params = [q for layer in stack for q in layer.parameters()] + dec2.parameters() + [xq, xkv]

        def micro(p):
            mem = xkv
            for layer in stack:
                mem = encoder_layer_forward(mem, pkv, layer)
            return T.sum(T.mul(decoder_layer_forward(xq, mem, pq, pkv, dec2), c))

        out.append(("2-layer encoder + decoder stack", grad_check(micro, params, EPS, TOL)))
    return out


def captioner_suite(seed=0):
    """Caption loss on a 3x16x16 image, vocab 8; every weight, pixels excluded."""
    rng = np.random.default_rng(seed)
    with precision("f64"):
        cfg = CaptionerConfig(vocab_size=8, d_model=8, num_heads=2, max_length=5,
                              channels=(4, 4, 4), dropout=0.0)
        model = CaptionModel(cfg, rng)
        _jitter_zero_params(model, rng)
        image = Tensor(rng.random((3, 16, 16)))
        gold = caption_targets([4, 5, 6], cfg.max_length)
        report = grad_check(lambda p: caption_loss(model.forward(image), gold), model.parameters(), EPS, TOL)
    return [("caption loss (all captioner weights)", report)]


def classifier_suite(seed=0, d=8):
    rng = np.random.default_rng(seed)
    out = []
    with precision("f64"):
        cfg = EncoderConfig(vocab_size=10, d_model=d, num_heads=2, num_layers=1, max_length=8,
                            dropout=0.0, pooler_dropout=0.0)
        enc = LanguageEncoderParams(cfg, rng)
        head = ClassifierHead(3, d, rng, dropout=0.0)
        pair = build_sentence_pair([4, 5], [6, 7], 8)
        out.append(("encode_pair + EF classifier loss", grad_check(
            lambda p: _scalar_nll(ef_logits(pair, enc, head), 2), enc.parameters() + head.parameters(), EPS, TOL)))

        head_lf = ClassifierHead(3, 2 * d, rng, dropout=0.0)
        pairs = (build_sentence_pair([4, 5], [6], 8), build_sentence_pair([8, 9], [6], 8))
        out.append(("LF classifier loss", grad_check(
            lambda p: _scalar_nll(lf_logits(pairs, enc, head_lf), 1), enc.parameters() + head_lf.parameters(), EPS, TOL)))

        head_bin = ClassifierHead(2, d, rng, dropout=0.0)
        qa = [build_sentence_pair([4, 5], [q, 6], 8) for q in (7, 8, 9)]

        def pair_qa_loss(p):
            total = None
            for i, pr in enumerate(qa):
                li = _scalar_nll(classifier_logits(encode_pair(pr, enc), head_bin), int(i == 1))
                total = li if total is None else T.add(total, li)
            return total

        out.append(("PairQA binary loss", grad_check(pair_qa_loss, enc.parameters() + head_bin.parameters(), EPS, TOL)))
    return out


SUITES = {
    "tensor": tensor_suite,
    "attention": attention_suite,
    "captioner": captioner_suite,
    "fusion": classifier_suite,
}


def run_suites(names=("all",), seed=0):
    if "all" in names:
        names = tuple(SUITES)
    results = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown gradcheck module {name!r}; choose from {sorted(SUITES)} or 'all'")
        for label, report in SUITES[name](seed):
            results.append((name, label, report))
    return results
