"""Sample records, dataset files, image loading and the synthetic generator.

Synthetic images are 2x2 grids of coloured squares. Each colour is an object
class with a fixed caption word, so captions are learnable from pixels.
Sentiment sentences contain an opinion target and a cue word; the label is
``(cue index + object index) mod 3``. Text alone and image alone are each
uninformative about the label, only their combination determines it.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .serialization import load_ten, save_ten
from .text import Vocabulary, split_words

SENTIMENT_LABELS = ("negative", "neutral", "positive")
RELATION_LABELS = ("text_not_represented", "text_is_represented")

OBJECTS = (
    ("fire", (0.9, 0.1, 0.1)),
    ("tree", (0.1, 0.8, 0.1)),
    ("rain", (0.1, 0.2, 0.9)),
)
CUES = ("wild", "quiet", "strange")
TARGETS = ("game", "trip", "show", "team")
TEMPLATES = (
    "the {target} felt {cue} today",
    "that {target} was so {cue}",
    "{cue} vibes at the {target}",
    "our {target} got {cue} again",
)


class DatasetError(ValueError):
    """A dataset record violates its schema."""


@dataclass
class MultimodalSample:
    """Sentence, character span of the opinion target, label and image (3 x H x W)."""

    sentence: str
    target_start: int
    target_end: int
    label: str | None
    image: np.ndarray | None = None
    image_ref: str | None = None

    @property
    def target(self):
        return self.sentence[self.target_start : self.target_end]


@dataclass
class CaptionPair:
    image: np.ndarray
    caption: str
    image_ref: str | None = None


def validate_sample(sample, labels=SENTIMENT_LABELS):
    if not 0 <= sample.target_start < sample.target_end <= len(sample.sentence):
        raise DatasetError(
            f"target span [{sample.target_start}, {sample.target_end}) outside sentence "
            f"of length {len(sample.sentence)}"
        )
    if sample.label is not None and sample.label not in labels:
        raise DatasetError(f"label {sample.label!r} not in {labels}")


# ---------------------------------------------------------------------------
# images


def read_ppm(path):
    """8-bit binary PPM (P6) -> 3 x H x W float array in [0, 1]."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PPM is supported")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path, image):
    arr = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    c, h, w = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + arr.transpose(1, 2, 0).tobytes())


def load_image(path):
    path = Path(path)
    if path.suffix == ".ten":
        arr = load_ten(path)
    elif path.suffix in (".ppm", ".pnm"):
        arr = read_ppm(path)
    else:
        raise DatasetError(f"unsupported image format {path.suffix!r} (use .ten or .ppm)")
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DatasetError(f"{path}: expected a 3 x H x W image, got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# JSON-lines files


def read_sentiment_jsonl(path, labels=SENTIMENT_LABELS, load_images=True):
    path = Path(path)
    samples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sample = MultimodalSample(
                sentence=rec["sentence"],
                target_start=int(rec["target_start"]),
                target_end=int(rec["target_end"]),
                label=rec.get("label"),
                image_ref=rec["image"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad record ({exc})") from None
        validate_sample(sample, labels)
        if load_images:
            sample.image = load_image(path.parent / sample.image_ref)
        samples.append(sample)
    return samples


def read_caption_jsonl(path):
    path = Path(path)
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            ref, caption = rec["image"], rec["caption"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad record ({exc})") from None
        pairs.append(CaptionPair(load_image(path.parent / ref), caption, ref))
    return pairs


def _dump_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_datasets(out_dir, caption_pairs, splits):
    """Write images as .ten files plus ``captions.jsonl`` and ``<split>.jsonl``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, pair in enumerate(caption_pairs):
        ref = f"images/cap_{i:04d}.ten"
        save_ten(out / ref, pair.image)
        records.append({"image": ref, "caption": pair.caption})
    _dump_jsonl(out / "captions.jsonl", records)
    for split, samples in splits.items():
        records = []
        for i, s in enumerate(samples):
            ref = f"images/{split}_{i:04d}.ten"
            save_ten(out / ref, s.image)
            records.append(
                {
                    "sentence": s.sentence,
                    "target_start": s.target_start,
                    "target_end": s.target_end,
                    "label": s.label,
                    "image": ref,
                }
            )
        _dump_jsonl(out / f"{split}.jsonl", records)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticSpec:
    image_size: int = 16
    n_captions: int = 48
    n_train: int = 64
    n_test: int = 96
    noise: float = 0.05


def label_of(cue_index, object_index):
    return SENTIMENT_LABELS[(cue_index + object_index) % len(SENTIMENT_LABELS)]


def render_scene(cells, rng, size=16, noise=0.05):
    """Draw object classes into a 2x2 grid. ``cells`` maps cell index -> object index."""
    img = rng.uniform(0.0, noise, size=(3, size, size))
    half = size // 2
    for cell, obj in cells.items():
        r, c = divmod(cell, 2)
        colour = np.asarray(OBJECTS[obj][1])[:, None, None]
        m = max(1, half // 8)
        img[:, r * half + m : (r + 1) * half - m, c * half + m : (c + 1) * half - m] = colour
    return np.clip(img, 0.0, 1.0)


def describe(cells):
    return " ".join(OBJECTS[cells[k]][0] for k in sorted(cells))


def make_sentence(rng, cue, target):
    template = TEMPLATES[rng.integers(len(TEMPLATES))]
    sentence = template.format(target=target, cue=cue)
    start = sentence.index(target)
    return sentence, start, start + len(target)


def generate_synthetic(seed, spec=None):
    """Return ``(caption_pairs, train_samples, test_samples)``, a pure function of the seed."""
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(seed)
    captions = []
    for _ in range(spec.n_captions):
        n_obj = int(rng.integers(1, 3))
        where = rng.choice(4, size=n_obj, replace=False)
        cells = {int(c): int(rng.integers(len(OBJECTS))) for c in where}
        captions.append(CaptionPair(render_scene(cells, rng, spec.image_size, spec.noise), describe(cells)))

    def sentiment(n):
        out = []
        for _ in range(n):
            cue_i = int(rng.integers(len(CUES)))
            obj_i = int(rng.integers(len(OBJECTS)))
            target = TARGETS[rng.integers(len(TARGETS))]
            sentence, s, e = make_sentence(rng, CUES[cue_i], target)
            cells = {int(rng.integers(4)): obj_i}
            img = render_scene(cells, rng, spec.image_size, spec.noise)
            out.append(MultimodalSample(sentence, s, e, label_of(cue_i, obj_i), img))
        return out

    return captions, sentiment(spec.n_train), sentiment(spec.n_test)


def text_only_bayes_accuracy():
    """Best accuracy achievable from the sentence alone under the generator.

    Enumerates every (template, target, cue, object) combination with its
    generator probability and lets an ideal text-only predictor pick the
    majority label for each distinct sentence.
    """
    table = {}
    p = 1.0 / (len(TEMPLATES) * len(TARGETS) * len(CUES) * len(OBJECTS))
    for template, target, cue_i, obj_i in itertools.product(
        TEMPLATES, TARGETS, range(len(CUES)), range(len(OBJECTS))
    ):
        text = template.format(target=target, cue=CUES[cue_i])
        counts = table.setdefault(text, {})
        label = label_of(cue_i, obj_i)
        counts[label] = counts.get(label, 0.0) + p
    return float(sum(max(c.values()) for c in table.values()))


def synthetic_vocabulary():
    """Vocabulary covering every word the generator can emit, in a fixed order."""
    words = set()
    for text in [o[0] for o in OBJECTS] + list(CUES) + list(TARGETS) + list(TEMPLATES):
        words.update(w for w in split_words(text.replace("{target}", "").replace("{cue}", "")))
    words.update(SENTIMENT_LABELS)
    return Vocabulary(sorted(words))
