"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""

import dataclasses
import math
import struct
import time

import numpy as np
import pytest

from captrfuse import tensor as T
from captrfuse.attention import AttentionBlock, attention_weights, multi_head, qkv_project
from captrfuse.captioner import CaptionerConfig, CaptionModel, caption_loss, decode_caption
from captrfuse.data import CaptionPair, SyntheticSpec, generate_synthetic, text_only_bayes_accuracy
from captrfuse.experiments import compare_fusion, experiment_config, pair_qa_calibration, pretrain_synthetic_captioner
from captrfuse.fusion import FusionMode
from captrfuse.gradcheck import EPS, TOL, run_suites
from captrfuse.metrics import PredictionRecord, accuracy, macro_f1, weighted_f1
from captrfuse.serialization import decode_tensor, encode_tensor
from captrfuse.tensor import Tensor, precision
from captrfuse.text import Vocabulary
from captrfuse.training import (
    FusionClassifierModel,
    TrainConfig,
    build_inputs,
    caption_token_accuracy,
    decode_all,
    load_checkpoint,
    param_hashes,
    predict_inputs,
    pretrain_captioner,
    sample_loss,
    save_checkpoint,
    train_classifier,
)

from conftest import SESSION


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return ok

    return emit


def test_criterion_01_gradient_suite(report):
    start = time.perf_counter()
    results = run_suites(("all",))
    elapsed = time.perf_counter() - start
    failed = [f"{m}/{label}" for m, label, r in results if not r.passed]
    worst = max(r.max_rel_error for _, _, r in results)
    ok = not failed and elapsed < 120
    report(1, "finite-difference gradients", ok,
           f"{len(results)} checks, eps={EPS}, tol={TOL}, worst rel err {worst:.2e}, "
           f"failed {failed or 'none'}, {elapsed:.1f}s (limit 120s)")
    assert not failed
    assert elapsed < 120


def test_criterion_02_attention_invariants(report):
    worst_row, pos_ok, perm_ok = 0.0, 0, 0
    with precision("f64"):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            d, heads = 8, 2
            nq, nkv = int(rng.integers(1, 7)), int(rng.integers(2, 9))
            block = AttentionBlock(d, heads, rng, dropout=0.0)
            xq, xkv = Tensor(rng.normal(size=(d, nq))), Tensor(rng.normal(size=(d, nkv)))
            pq, pkv = Tensor(rng.normal(size=(d, nq))), Tensor(rng.normal(size=(d, nkv)))
            q, k, v = qkv_project(xq, xkv, pq, pkv, block.heads[0])
            alpha = attention_weights(q, k).data
            worst_row = max(worst_row, float(np.abs(alpha.sum(axis=1) - 1).max()))
            # values ignore positions entirely
            _, _, v_other = qkv_project(xq, xkv, Tensor(rng.normal(size=(d, nq))),
                                        Tensor(rng.normal(size=(d, nkv))), block.heads[0])
            _, _, v_none = qkv_project(xq, xkv, None, None, block.heads[0])
            pos_ok += np.array_equal(v.data, v_other.data) and np.array_equal(v.data, v_none.data)
            perm = rng.permutation(nkv)
            a = multi_head(xq, xkv, block, pq, pkv).data
            b = multi_head(xq, Tensor(xkv.data[:, perm]), block, pq, Tensor(pkv.data[:, perm])).data
            perm_ok += bool(np.allclose(a, b, atol=1e-10, rtol=0))
    ok = worst_row <= 1e-6 and pos_ok == 100 and perm_ok == 100
    report(2, "attention invariants over 100 seeds", ok,
           f"max |row sum - 1| = {worst_row:.1e} (tol 1e-6), V position-independent {pos_ok}/100, "
           f"key-value permutation invariant {perm_ok}/100")
    assert ok


def test_criterion_03_caption_loss_semantics(report):
    with precision("f64"):
        rng = np.random.default_rng(0)
        zero_ok = all(
            float(caption_loss(Tensor(rng.normal(size=(6, 9))), np.array([1, 0, 0, 0, 0, 0])).data) == 0.0
            for _ in range(20)
        )
        invariant = True
        for _ in range(20):
            gold = np.array([1, 4, 5, 2, 0, 0, 0])
            logits = rng.normal(size=(7, 9))
            base = float(caption_loss(Tensor(logits), gold).data)
            logits[4:] = rng.normal(scale=1e3, size=(3, 9))
            invariant &= float(caption_loss(Tensor(logits), gold).data) == base
        exact, total = 0, 0
        for vocab_size in range(3, 65):
            for k in range(1, 16):
                gold = np.zeros(k + 2, dtype=np.int64)
                gold[0] = 1
                gold[1 : k + 1] = 2
                value = float(caption_loss(Tensor(np.zeros((k + 2, vocab_size))), gold).data)
                exact += value == k * math.log(vocab_size)
                total += 1
    ok = zero_ok and invariant and exact == total
    report(3, "masked caption loss", ok,
           f"fully masked -> 0: {zero_ok}; invariant to [PAD]-position logits: {invariant}; "
           f"uniform logits == k ln V exactly in {exact}/{total} (k, V) cases")
    assert ok


def test_criterion_04_non_autoregressive(report):
    rng = np.random.default_rng(0)
    cfg = CaptionerConfig(vocab_size=12, d_model=16, num_heads=2, max_length=8, dropout=0.3)
    model = CaptionModel(cfg, rng)
    counts, outputs = [], []
    for _ in range(5):
        image = Tensor(np.random.default_rng(1).random((3, 16, 16)))
        model.reset_counters()
        outputs.append(decode_caption(image, model))
        counts.append(model.pass_counts)
    one_pass = all(c == {"encoder": 1, "decoder": 1} for c in counts)
    deterministic = all(o == outputs[0] for o in outputs)
    report(4, "single-pass decoding", one_pass and deterministic,
           f"pass counts {counts[0]} on every call: {one_pass}; identical output over 5 eval calls: {deterministic}")
    assert one_pass and deterministic


def _group_hashes(modules):
    out = {}
    for prefix, module in modules.items():
        out.update(param_hashes(module, prefix))
    return out


def test_criterion_05_phase_separation(report, synthetic):
    from captrfuse.training import param_group

    captions, train, _ = synthetic
    vocab = __import__("captrfuse").synthetic_vocabulary()
    cfg = experiment_config(0, caption_epochs=3, epochs=2)
    rng = np.random.default_rng(0)
    captioner = CaptionModel(cfg.captioner_config(len(vocab)), rng)
    bystander = FusionClassifierModel(cfg.encoder_config(len(vocab)), FusionMode.EF, 3, rng)
    modules = {"captioner.": captioner, "classifier.": bystander}

    touched_p1 = set()
    prev = _group_hashes(modules)

    def audit_p1(step, loss):
        nonlocal prev
        now = _group_hashes(modules)
        touched_p1.update(param_group(k) for k in now if now[k] != prev[k])
        prev = now

    ckpt, _, hist1 = pretrain_captioner(captions, vocab, cfg, model=captioner, on_step=audit_p1)

    frozen = ckpt.captioner()
    tracked = dataclasses.replace(ckpt)
    tracked.captioner = lambda: frozen
    frozen_hash = param_hashes(frozen, "captioner.")
    p2_violations = []

    def audit_p2(step, loss):
        if param_hashes(frozen, "captioner.") != frozen_hash:
            p2_violations.append(step)

    run = train_classifier(train, tracked, cfg, FusionMode.EF, on_step=audit_p2)
    final = {k: v for k, v in run.checkpoint.params.items() if k.startswith("captioner.")}
    final_same = all(final[k].tobytes() == ckpt.params[k].tobytes() for k in final)
    start_clf = FusionClassifierModel(cfg.encoder_config(len(vocab)), FusionMode.EF, 3, np.random.default_rng(cfg.seed))
    changed_p2 = {param_group("classifier." + k) for k, h in param_hashes(run.model).items()
                  if h != param_hashes(start_clf)[k]}

    ok = (touched_p1 == {"theta_ResNet", "theta_DETRLayer", "theta_FFN"} and not p2_violations
          and final_same and changed_p2 == {"theta_BERT", "theta_Linear"})
    report(5, "two-phase parameter separation", ok,
           f"phase 1 ({len(hist1)} steps) touched {sorted(touched_p1)}; phase 2 ({len(run.history)} steps) "
           f"captioner hash changes at steps {p2_violations or 'none'}, updated {sorted(changed_p2)}")
    assert ok


def test_criterion_06_overfit_capability(report):
    # phase 1: four toy pairs, at most 500 updates
    rng = np.random.default_rng(0)
    words = ["red", "blue", "green", "dot", "bar", "ring"]
    pairs = [CaptionPair(rng.random((3, 16, 16)), " ".join(rng.choice(words, size=3))) for _ in range(4)]
    vocab = Vocabulary(words)
    cfg1 = TrainConfig(caption_epochs=500, caption_batch_size=4, dropout=0.0)
    model = CaptionModel(cfg1.captioner_config(len(vocab)), np.random.default_rng(cfg1.seed))
    reached = {}

    def probe(step, loss):
        if "step" not in reached and step % 25 == 0 and caption_token_accuracy(model, pairs, vocab) >= 0.99:
            reached["step"] = step

    start = time.perf_counter()
    pretrain_captioner(pairs, vocab, cfg1, model=model, on_step=probe)
    acc1 = caption_token_accuracy(model, pairs, vocab)
    phase1_ok = acc1 >= 0.99 and "step" in reached

    # phase 2: default fine-tuning hyperparameters, 64 synthetic samples, 6 epochs
    captioner_ckpt, _, _ = pretrain_synthetic_captioner(0)
    _, train, _ = generate_synthetic(0, SyntheticSpec(n_train=64))
    cfg2 = TrainConfig(dropout=0.1)
    run = train_classifier(train, captioner_ckpt, cfg2, FusionMode.EF)
    best2 = max(r["train_accuracy"] for r in run.epoch_metrics)
    phase2_ok = best2 >= 0.95
    elapsed = time.perf_counter() - start
    ok = phase1_ok and phase2_ok and elapsed < 300
    report(6, "overfit capability", ok,
           f"phase 1 token accuracy {acc1:.3f} (>= 0.99 first seen at step {reached.get('step', 'never')}, limit 500); "
           f"phase 2 EF train accuracy per epoch {[round(r['train_accuracy'], 3) for r in run.epoch_metrics]} "
           f"(need >= 0.95; lr {cfg2.learning_rate}, batch {cfg2.batch_size}, {cfg2.epochs} epochs, "
           f"{len(run.history)} updates); {elapsed:.0f}s (limit 300s)")
    assert phase1_ok, "phase 1 did not reach 99% token accuracy"
    assert phase2_ok, "phase 2 EF did not reach 95% train accuracy"
    assert elapsed < 300


def test_criterion_07_early_beats_late_fusion(report):
    bayes = text_only_bayes_accuracy()
    result = compare_fusion(seeds=range(5))
    ok = bayes < 1.0 and result.ef_mean >= result.lf_mean
    report(7, "EF >= LF on joint-dependency data", ok,
           f"text-only Bayes accuracy {bayes:.4f}; EF {[round(a, 3) for a in result.ef]} mean {result.ef_mean:.4f}; "
           f"LF {[round(a, 3) for a in result.lf]} mean {result.lf_mean:.4f}")
    assert bayes < 1.0
    assert result.ef_mean >= result.lf_mean


def _naive_scores(gold, pred, k):
    n = len(gold)
    acc = sum(1 for g, p in zip(gold, pred) if g == p) / n
    f1s, supports = [], []
    for c in range(k):
        tp = fp = fn = 0
        for g, p in zip(gold, pred):
            if p == c and g == c:
                tp += 1
            elif p == c:
                fp += 1
            elif g == c:
                fn += 1
        f1s.append(2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0)
        supports.append(sum(1 for g in gold if g == c))
    macro = sum(f1s) / k
    weighted = sum(f * s for f, s in zip(f1s, supports)) / n
    return acc, macro, weighted


def test_criterion_08_metric_oracles(report):
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 60))
        gold = rng.integers(0, k, size=n).tolist()
        pred = rng.integers(0, k, size=n).tolist()
        recs = [PredictionRecord(i, g, p, (1.0,)) for i, (g, p) in enumerate(zip(gold, pred))]
        got = (accuracy(recs), macro_f1(recs, k), weighted_f1(recs, k))
        mismatches += got != _naive_scores(gold, pred, k)
    worked = [PredictionRecord(i, g, p, (1.0,)) for i, (g, p) in enumerate(zip([0, 0, 1, 1], [0, 1, 1, 1]))]
    macro = macro_f1(worked, 2)
    worked_ok = abs(macro - (2 / 3 + 0.8) / 2) <= 1e-9
    ok = mismatches == 0 and worked_ok
    report(8, "metric oracles", ok,
           f"{1000 - mismatches}/1000 random record sets match the naive loops exactly; "
           f"worked example macro-F1 {macro:.10f} (expected 0.7333333333)")
    assert ok


def test_criterion_09_calibration_signature(report):
    result = pair_qa_calibration(seed=0, temperature=0.25)
    # three encoder passes per training instance as well
    ckpt, captioner, _ = pretrain_synthetic_captioner(0)[0], None, None
    captioner = ckpt.captioner()
    vocab = ckpt.vocabulary()
    _, train, _ = generate_synthetic(0, SyntheticSpec(n_train=8))
    cfg = experiment_config(0)
    model = FusionClassifierModel(cfg.encoder_config(len(vocab)), FusionMode.PAIR_QA, 3, np.random.default_rng(0))
    inputs = build_inputs(train, decode_all(train, captioner, vocab), FusionMode.PAIR_QA, vocab, cfg.max_length,
                          cfg.labels)
    train_passes = []
    for x, y in inputs:
        model.encoder.reset_counters()
        sample_loss(model, x, y, training=True, rng=np.random.default_rng(0))
        train_passes.append(model.encoder.passes)
    ok = result.ece_sharpened > result.ece and result.passes_per_sample == 3.0 and set(train_passes) == {3}
    report(9, "PairQA calibration", ok,
           f"ECE {result.ece:.4f} unsharpened vs {result.ece_sharpened:.4f} at temperature 0.25 "
           f"(accuracy {result.accuracy:.3f}); encoder passes per sample: inference "
           f"{result.passes_per_sample:.1f}, training {sorted(set(train_passes))}")
    assert ok


def test_criterion_10_serialization(report, trained_captioner, synthetic, tmp_path):
    captioner_ckpt = trained_captioner[0]
    _, train, test = synthetic
    run = train_classifier(train[:4], captioner_ckpt, experiment_config(0, epochs=1), FusionMode.EF)
    save_checkpoint(run.checkpoint, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck")
    vocab = loaded.vocabulary()
    image = T.as_tensor(test[0].image)
    with T.no_grad():
        cap_same = (run.checkpoint.captioner().forward(image).data.tobytes()
                    == loaded.captioner().forward(image).data.tobytes())
    caps = decode_all(test, loaded.captioner(), vocab)
    inputs = build_inputs(test, caps, FusionMode.EF, vocab, 16, TrainConfig().labels)
    before = [p.tobytes() for _, p, _ in predict_inputs(run.model, inputs)]
    after = [p.tobytes() for _, p, _ in predict_inputs(loaded.classifier(), inputs)]
    clf_same = before == after

    arr = np.array([[1.5, -2.0, 3.25]], dtype=np.float64)
    expected = b"TEN1" + struct.pack("<BI2Q", 1, 2, 1, 3) + struct.pack("<3d", *arr.ravel())
    layout_ok = encode_tensor(arr) == expected and encode_tensor(arr.astype(">f8")) == expected
    foreign = decode_tensor(expected)
    decode_ok = foreign.dtype.isnative and np.array_equal(foreign, arr)
    ok = cap_same and clf_same and layout_ok and decode_ok
    report(10, "checkpoint and .ten round trip", ok,
           f"captioner forward bit-identical: {cap_same}; classifier forward bit-identical over {len(test)} samples: "
           f"{clf_same}; little-endian layout independent of input byte order: {layout_ok}; "
           f"decoded to native order: {decode_ok}")
    assert ok


@pytest.mark.runs_last
def test_criterion_11_suite_runtime(report):
    elapsed = time.perf_counter() - SESSION["start"]
    ok = elapsed < 600
    report(11, "full test suite runtime", ok, f"{elapsed:.0f}s from session start to last test (limit 600s)")
    assert ok
