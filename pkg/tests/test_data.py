import json

import numpy as np
import pytest

from captrfuse.data import (
    CUES,
    OBJECTS,
    DatasetError,
    MultimodalSample,
    SyntheticSpec,
    generate_synthetic,
    label_of,
    load_image,
    read_caption_jsonl,
    read_ppm,
    read_sentiment_jsonl,
    synthetic_vocabulary,
    text_only_bayes_accuracy,
    validate_sample,
    write_datasets,
    write_ppm,
)
from captrfuse.text import tokenize

SPEC = SyntheticSpec(n_captions=8, n_train=16, n_test=8)


def _object_in(image):
    """Recover the object class from the dominant colour of the brightest cell."""
    means = image.reshape(3, -1)
    bright = means[:, means.sum(axis=0) > 0.6].mean(axis=1)
    return int(np.argmin([np.abs(bright - np.asarray(c)).sum() for _, c in OBJECTS]))


def test_same_seed_identical():
    a, b = generate_synthetic(3, SPEC), generate_synthetic(3, SPEC)
    for xs, ys in zip(a, b):
        for x, y in zip(xs, ys):
            assert np.array_equal(x.image, y.image)
            assert getattr(x, "caption", None) == getattr(y, "caption", None)
            assert getattr(x, "sentence", None) == getattr(y, "sentence", None)


def test_labels_follow_generating_rule():
    _, train, test = generate_synthetic(1, SPEC)
    for s in train + test:
        cue = next(i for i, c in enumerate(CUES) if c in s.sentence.split())
        assert s.label == label_of(cue, _object_in(s.image))


def test_captions_name_visible_objects():
    captions, _, _ = generate_synthetic(2, SPEC)
    names = {o[0] for o in OBJECTS}
    for pair in captions:
        assert 1 <= len(pair.caption.split()) <= 2
        assert set(pair.caption.split()) <= names


def test_text_only_bayes_below_one():
    assert text_only_bayes_accuracy() == pytest.approx(1 / 3)
    assert text_only_bayes_accuracy() < 1.0


def test_vocabulary_covers_generator():
    vocab = synthetic_vocabulary()
    captions, train, _ = generate_synthetic(0, SPEC)
    texts = [c.caption for c in captions] + [s.sentence for s in train] + ["negative neutral positive"]
    for text in texts:
        assert vocab.unk_id not in tokenize(text, vocab)


def test_target_span():
    _, train, _ = generate_synthetic(0, SPEC)
    for s in train:
        assert s.target in s.sentence.split()


class TestValidation:
    def test_bad_span(self):
        with pytest.raises(DatasetError):
            validate_sample(MultimodalSample("abc", 2, 9, "neutral"))

    def test_bad_label(self):
        with pytest.raises(DatasetError):
            validate_sample(MultimodalSample("abc", 0, 1, "angry"))


class TestFiles:
    def test_write_and_read(self, tmp_path):
        captions, train, test = generate_synthetic(0, SPEC)
        write_datasets(tmp_path, captions, {"train": train, "test": test})
        back = read_sentiment_jsonl(tmp_path / "train.jsonl")
        assert [s.sentence for s in back] == [s.sentence for s in train]
        np.testing.assert_array_equal(back[0].image, train[0].image)
        pairs = read_caption_jsonl(tmp_path / "captions.jsonl")
        assert [p.caption for p in pairs] == [c.caption for c in captions]

    def test_bad_record(self, tmp_path):
        (tmp_path / "x.jsonl").write_text(json.dumps({"sentence": "a b"}) + "\n")
        with pytest.raises(DatasetError, match="x.jsonl:1"):
            read_sentiment_jsonl(tmp_path / "x.jsonl")

    def test_ppm_round_trip(self, tmp_path, rng):
        img = np.round(rng.random((3, 8, 8)) * 255) / 255
        write_ppm(tmp_path / "a.ppm", img)
        np.testing.assert_allclose(read_ppm(tmp_path / "a.ppm"), img, atol=1e-12)
        np.testing.assert_allclose(load_image(tmp_path / "a.ppm"), img, atol=1e-12)

    def test_ppm_with_comment(self, tmp_path):
        (tmp_path / "c.ppm").write_bytes(b"P6\n# note\n1 1\n255\n" + bytes([255, 0, 0]))
        np.testing.assert_array_equal(read_ppm(tmp_path / "c.ppm")[:, 0, 0], [1.0, 0.0, 0.0])

    def test_unsupported_format(self, tmp_path):
        with pytest.raises(DatasetError):
            load_image(tmp_path / "a.png")
