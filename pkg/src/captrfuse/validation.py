"""Input checks shared by the estimators and the CLI."""

import numpy as np

from .data import MultimodalSample, validate_sample


def check_images(X, divisor=8):
    """Coerce to an ``(n, 3, H, W)`` float array with values in [0, 1]."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"expected images shaped (n, 3, H, W), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("no images given")
    if arr.shape[2] % divisor or arr.shape[3] % divisor:
        raise ValueError(f"image size {arr.shape[2]}x{arr.shape[3]} not divisible by {divisor}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise ValueError("pixel values must be finite and lie in [0, 1]")
    return arr


def check_captions(y, n):
    captions = [str(c) for c in y]
    if len(captions) != n:
        raise ValueError(f"{n} images but {len(captions)} captions")
    return captions


def _as_sample(x):
    if isinstance(x, MultimodalSample):
        return x
    if isinstance(x, dict):
        return MultimodalSample(
            sentence=x["sentence"],
            target_start=int(x["target_start"]),
            target_end=int(x["target_end"]),
            label=x.get("label"),
            image=np.asarray(x["image"], dtype=np.float64) if x.get("image") is not None else None,
        )
    raise TypeError(f"cannot interpret {type(x).__name__} as a multimodal sample")


def check_samples(X, y=None, labels=None):
    """List of :class:`MultimodalSample` with images; labels overridden by ``y``."""
    samples = [_as_sample(x) for x in X]
    if not samples:
        raise ValueError("no samples given")
    if y is not None:
        y = list(y)
        if len(y) != len(samples):
            raise ValueError(f"{len(samples)} samples but {len(y)} labels")
        samples = [
            MultimodalSample(s.sentence, s.target_start, s.target_end, str(lab), s.image, s.image_ref)
            for s, lab in zip(samples, y)
        ]
    for s in samples:
        validate_sample(s, labels or (s.label,))
        if s.image is None:
            raise ValueError("every sample needs an image")
        check_images(s.image)
    return samples
