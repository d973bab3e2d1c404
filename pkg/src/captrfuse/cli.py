"""Command-line entry point (``captrfuse``).

Exit codes: 0 success, 1 invalid input (flags, config, dataset), 2 runtime
failure (I/O, checkpoint, divergence, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .captioner import as_image, decode_caption
from .data import (
    DatasetError,
    SyntheticSpec,
    generate_synthetic,
    load_image,
    read_caption_jsonl,
    read_sentiment_jsonl,
    synthetic_vocabulary,
    write_datasets,
)
from .experiments import evaluate_model
from .fusion import FusionMode
from .gradcheck import SUITES, run_suites
from .metrics import (
    calibration_report,
    caption_length_bins,
    length_bins_csv,
    metrics_summary,
    per_class_csv,
    read_records,
    reliability_csv,
    write_records,
)
from .serialization import TensorFormatError
from .text import Vocabulary, build_aux_sentence, detokenize, split_words, tokenize
from .training import (
    CheckpointError,
    ConfigError,
    TrainConfig,
    TrainingError,
    load_checkpoint,
    pretrain_captioner,
    save_checkpoint,
    train_classifier,
)

log = logging.getLogger("captrfuse")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config(args):
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


def _require_dir(path, what):
    if path is None:
        raise ConfigError(f"{what} is required")
    return Path(path)


def _out_dir(args):
    out = _require_dir(args.out, "--out")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args):
    spec_fields = {f.name for f in fields(SyntheticSpec)}
    overrides = {}
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        unknown = sorted(set(overrides) - spec_fields)
        if unknown:
            raise ConfigError(f"unknown synthetic-data fields: {unknown}")
    spec = SyntheticSpec(**overrides)
    if spec.image_size % 8 or min(spec.n_captions, spec.n_train, spec.n_test) < 1:
        raise ConfigError("image_size must be a multiple of 8 and every split non-empty")
    seed = 0 if args.seed is None else args.seed
    out = _out_dir(args)
    captions, train, test = generate_synthetic(seed, spec)
    write_datasets(out, captions, {"train": train, "test": test})
    synthetic_vocabulary().save(out / "vocab.txt")
    _write_json(out / "config.json", {"seed": seed, **asdict(spec)})
    log.info("wrote %d caption pairs, %d train, %d test to %s", len(captions), len(train), len(test), out)
    return 0


def _dataset_vocab(data, captions):
    vocab_file = data / "vocab.txt"
    if vocab_file.is_file():
        return Vocabulary.load(vocab_file)
    texts = [p.caption for p in captions]
    for split in sorted(data.glob("*.jsonl")):
        if split.name != "captions.jsonl":
            texts += [s.sentence for s in read_sentiment_jsonl(split, load_images=False)]
    return Vocabulary.from_texts(texts)


def cmd_pretrain_captioner(args):
    cfg = _load_config(args)
    data = _require_dir(args.data, "--data")
    out = _out_dir(args)
    pairs = read_caption_jsonl(data / "captions.jsonl")
    vocab = _dataset_vocab(data, pairs)
    sizes = {p.image.shape[1:] for p in pairs}
    if sizes != {(cfg.image_size, cfg.image_size)}:
        raise DatasetError(f"caption images have sizes {sorted(sizes)}, config expects {cfg.image_size}")
    _write_json(out / "config.json", cfg.to_dict())
    ckpt, model, history = pretrain_captioner(pairs, vocab, cfg, steps=args.steps)
    save_checkpoint(ckpt, out / "checkpoint")
    _write_json(out / "history.json", {"loss": history})
    log.info("phase 1 done: %d steps, final loss %.4f", len(history), history[-1])
    return 0


def cmd_train_classifier(args):
    cfg = _load_config(args)
    data = _require_dir(args.data, "--data")
    ckpt_dir = _require_dir(args.ckpt, "--ckpt")
    mode = FusionMode(args.mode or "EF")
    out = _out_dir(args)
    train = read_sentiment_jsonl(data / "train.jsonl", cfg.labels)
    val_path = data / "val.jsonl"
    val = read_sentiment_jsonl(val_path, cfg.labels) if val_path.is_file() else None
    if any(s.label is None for s in train):
        raise DatasetError("every training record needs a label")
    captioner_ckpt = load_checkpoint(ckpt_dir)
    _write_json(out / "config.json", {**cfg.to_dict(), "mode": mode.value, "captioner_ckpt": str(ckpt_dir)})
    run = train_classifier(train, captioner_ckpt, cfg, mode, val_samples=val)
    save_checkpoint(run.checkpoint, out / "checkpoint")
    _write_json(out / "history.json", {"loss": run.history, "epochs": run.epoch_metrics, "best_epoch": run.best_epoch})
    return 0


def cmd_evaluate(args):
    data = _require_dir(args.data, "--data")
    ckpt = load_checkpoint(_require_dir(args.ckpt, "--ckpt"))
    if "classifier" not in ckpt.config:
        raise ConfigError("evaluate needs a classifier checkpoint (from train-classifier)")
    stored = FusionMode(ckpt.config["classifier"]["mode"])
    if args.mode and FusionMode(args.mode) is not stored:
        raise ConfigError(f"--mode {args.mode} does not match the checkpoint's mode {stored.value}")
    labels = tuple(ckpt.meta.get("labels", TrainConfig().labels))
    out = _out_dir(args)
    samples = read_sentiment_jsonl(data / f"{args.split}.jsonl", labels)
    if any(s.label is None for s in samples):
        raise DatasetError("evaluation records need gold labels")
    _write_json(out / "config.json", {"ckpt": str(args.ckpt), "data": str(data), "split": args.split,
                                      "mode": stored.value, "labels": list(labels)})
    records = evaluate_model(ckpt.classifier(), samples, ckpt.captioner(), ckpt.vocabulary(), labels)
    summary = {**metrics_summary(records, len(labels)), "mode": stored.value, "labels": list(labels)}
    _write_json(out / "metrics.json", summary)
    write_records(out / "predictions.jsonl", records)
    (out / "per_class.csv").write_text(per_class_csv(records, labels), encoding="utf-8")
    print(json.dumps({k: summary[k] for k in ("accuracy", "macro_f1", "weighted_f1")}))
    return 0


def cmd_analyze(args):
    if args.records is None:
        raise ConfigError("--records is required")
    if args.bin_width < 1 or args.bins < 1:
        raise ConfigError("--bin-width and --bins must be positive")
    records = read_records(args.records)
    if not records:
        raise DatasetError(f"{args.records} holds no prediction records")
    out = _out_dir(args)
    _write_json(out / "config.json", {"records": str(args.records), "bin_width": args.bin_width, "bins": args.bins})
    length_bins = caption_length_bins(records, args.bin_width)
    ece, table = calibration_report(records, args.bins)
    (out / "length_bins.csv").write_text(length_bins_csv(length_bins), encoding="utf-8")
    (out / "reliability.csv").write_text(reliability_csv(table), encoding="utf-8")
    num_classes = max(len(records[0].probs), 1 + max(max(r.gold, r.pred) for r in records))
    _write_json(out / "analysis.json", {**metrics_summary(records, num_classes), "ece": ece,
                                        "bin_width": args.bin_width, "bins": args.bins})
    print(json.dumps({"ece": ece}))
    return 0


def cmd_gradcheck(args):
    seed = 0 if args.seed is None else args.seed
    results = run_suites((args.module,), seed=seed)
    rows = []
    for module, label, report in results:
        status = "ok" if report.passed else "FAIL"
        print(f"{status:4s} {module:9s} {label}  max_rel_err={report.max_rel_error:.2e}  entries={report.checked}")
        rows.append({"module": module, "check": label, "passed": report.passed,
                     "max_rel_error": report.max_rel_error, "checked": report.checked})
    if args.out:
        out = _out_dir(args)
        _write_json(out / "config.json", {"module": args.module, "seed": seed})
        _write_json(out / "gradcheck.json", rows)
    return 0 if all(r["passed"] for r in rows) else 2


def cmd_decode(args):
    if args.image is None:
        raise ConfigError("--image is required")
    ckpt = load_checkpoint(_require_dir(args.ckpt, "--ckpt"))
    vocab = ckpt.vocabulary()
    model = ckpt.captioner()
    image = load_image(args.image)
    size = model.config.image_size
    if image.shape[1:] != (size, size):
        raise DatasetError(f"image is {image.shape[1]}x{image.shape[2]}, captioner expects {size}x{size}")
    if args.show_aux is not None and not split_words(args.show_aux):
        raise ConfigError("--show-aux needs a non-empty target")
    ids = decode_caption(as_image(image), model, vocab)
    print(detokenize(ids, vocab))
    if args.show_aux is not None:
        print(detokenize(build_aux_sentence(tokenize(args.show_aux, vocab), ids), vocab))
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain-captioner": cmd_pretrain_captioner,
    "train-classifier": cmd_train_classifier,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "decode": cmd_decode,
}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file of config fields")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, help="output directory")

    parser = _Parser(prog="captrfuse", description="Image-to-text fusion for target sentiment.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic dataset")

    p = sub.add_parser("pretrain-captioner", parents=[common], help="phase 1: train the captioner")
    p.add_argument("--data", type=Path, help="dataset directory with captions.jsonl")
    p.add_argument("--steps", type=int, help="stop after this many updates")

    p = sub.add_parser("train-classifier", parents=[common], help="phase 2: fine-tune the classifier")
    p.add_argument("--data", type=Path, help="dataset directory with train.jsonl (val.jsonl optional)")
    p.add_argument("--ckpt", type=Path, help="captioner checkpoint directory")
    p.add_argument("--mode", choices=[m.value for m in FusionMode])

    p = sub.add_parser("evaluate", parents=[common], help="score a classifier checkpoint")
    p.add_argument("--data", type=Path)
    p.add_argument("--ckpt", type=Path, help="classifier checkpoint directory")
    p.add_argument("--mode", choices=[m.value for m in FusionMode])
    p.add_argument("--split", default="test")

    p = sub.add_parser("analyze", parents=[common], help="length bins and calibration from predictions")
    p.add_argument("--records", type=Path, help="predictions.jsonl written by evaluate")
    p.add_argument("--bin-width", type=int, default=5)
    p.add_argument("--bins", type=int, default=10)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    p.add_argument("--module", choices=sorted(SUITES) + ["all"], default="all")

    p = sub.add_parser("decode", parents=[common], help="caption one image")
    p.add_argument("--image", type=Path, help=".ten or binary .ppm image")
    p.add_argument("--ckpt", type=Path, help="any checkpoint directory")
    p.add_argument("--show-aux", metavar="TARGET", help="also print the auxiliary sentence for TARGET")
    return parser


def _configure_logging():
    name = os.environ.get("CAPTRFUSE_LOG", "error").lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"CAPTRFUSE_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", force=True)


def run(argv=None):
    """Parse ``argv`` and dispatch; returns the process exit code."""
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError:
        return 1
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, CheckpointError, TensorFormatError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
