"""Classification metrics, caption-length binning and calibration reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class PredictionRecord:
    sample_id: int
    gold: int
    pred: int
    probs: tuple
    caption_length: int = 0
    mode: str = "EF"
    confidence: float | None = None

    @property
    def conf(self):
        """Confidence used for calibration: explicit override, else max probability."""
        return float(self.confidence) if self.confidence is not None else float(max(self.probs))

    def to_dict(self):
        out = asdict(self)
        out["probs"] = [float(p) for p in self.probs]
        return out


def _require(records):
    records = list(records)
    if not records:
        raise ValueError("metrics need at least one record")
    return records


def accuracy(records):
    records = _require(records)
    return float(np.mean([r.gold == r.pred for r in records]))


def accuracy_score_labels(gold, pred):
    gold, pred = np.asarray(gold), np.asarray(pred)
    if gold.size == 0:
        raise ValueError("metrics need at least one record")
    return float(np.mean(gold == pred))


def per_class_f1(gold, pred, num_classes):
    """F1 per class; 0 whenever precision + recall is 0."""
    gold, pred = np.asarray(gold), np.asarray(pred)
    out = np.zeros(num_classes)
    for c in range(num_classes):
        tp = np.sum((pred == c) & (gold == c))
        fp = np.sum((pred == c) & (gold != c))
        fn = np.sum((pred != c) & (gold == c))
        denom = 2 * tp + fp + fn
        out[c] = 2 * tp / denom if denom else 0.0
    return out


def macro_f1(records, num_classes):
    records = _require(records)
    f1 = per_class_f1([r.gold for r in records], [r.pred for r in records], num_classes)
    return float(f1.mean())


def weighted_f1(records, num_classes):
    """Per-class F1 weighted by each class's share of the gold labels."""
    records = _require(records)
    gold = np.asarray([r.gold for r in records])
    f1 = per_class_f1(gold, [r.pred for r in records], num_classes)
    support = np.bincount(gold, minlength=num_classes)[:num_classes]
    return float((f1 * support).sum() / support.sum())


@dataclass
class LengthBin:
    low: int
    high: int
    correct: int
    incorrect: int

    @property
    def count(self):
        return self.correct + self.incorrect

    @property
    def accuracy(self):
        return self.correct / self.count if self.count else float("nan")


def caption_length_bins(records, bin_width=5):
    """Group records into ``[k*w, (k+1)*w)`` caption-length bins.

    Bins run from the one holding the shortest caption to the one holding the
    longest, so they are disjoint and cover every record.
    """
    if bin_width < 1:
        raise ValueError("bin_width must be at least 1")
    records = list(records)
    if not records:
        return []
    keys = [r.caption_length // bin_width for r in records]
    bins = []
    for k in range(min(keys), max(keys) + 1):
        members = [r for r, key in zip(records, keys) if key == k]
        correct = sum(r.gold == r.pred for r in members)
        bins.append(LengthBin(k * bin_width, (k + 1) * bin_width, correct, len(members) - correct))
    return bins


@dataclass
class ReliabilityBin:
    low: float
    high: float
    count: int
    mean_confidence: float
    accuracy: float


def calibration_report(records, n_bins=10):
    """Expected calibration error over equal-width confidence bins on [0, 1].

    Returns ``(ece, bins)``; empty bins are listed with zero count.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    records = _require(records)
    conf = np.asarray([r.conf for r in records], dtype=np.float64)
    correct = np.asarray([r.gold == r.pred for r in records], dtype=np.float64)
    # confidence 1.0 belongs to the last bin
    idx = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    n = len(records)
    ece = 0.0
    table = []
    for b in range(n_bins):
        sel = idx == b
        cnt = int(sel.sum())
        if cnt:
            mc, acc = float(conf[sel].mean()), float(correct[sel].mean())
            ece += cnt / n * abs(mc - acc)
        else:
            mc = acc = 0.0
        table.append(ReliabilityBin(b / n_bins, (b + 1) / n_bins, cnt, mc, acc))
    return float(ece), table


def metrics_summary(records, num_classes):
    return {
        "n": len(records),
        "accuracy": accuracy(records),
        "macro_f1": macro_f1(records, num_classes),
        "weighted_f1": weighted_f1(records, num_classes),
    }


def length_bins_csv(bins):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_low", "bin_high", "n_correct", "n_incorrect", "accuracy"])
    for b in bins:
        w.writerow([b.low, b.high, b.correct, b.incorrect, f"{b.accuracy:.6f}"])
    return buf.getvalue()


def reliability_csv(bins):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_low", "bin_high", "count", "mean_confidence", "accuracy"])
    for b in bins:
        w.writerow([f"{b.low:.4f}", f"{b.high:.4f}", b.count, f"{b.mean_confidence:.6f}", f"{b.accuracy:.6f}"])
    return buf.getvalue()


def per_class_csv(records, labels):
    f1 = per_class_f1([r.gold for r in records], [r.pred for r in records], len(labels))
    gold = np.asarray([r.gold for r in records])
    support = np.bincount(gold, minlength=len(labels))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "support", "f1"])
    for i, name in enumerate(labels):
        w.writerow([name, int(support[i]), f"{f1[i]:.6f}"])
    return buf.getvalue()


def write_records(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def read_records(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                d["probs"] = tuple(d["probs"])
                out.append(PredictionRecord(**d))
    return out
