"""Small argument checks shared across modules."""

import numpy as np


def check_positive(value, name):
    if not value > 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")


def check_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


def check_same_shape(a, b, what="inputs"):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"{what} differ in shape: {a.shape} vs {b.shape}")
    return a, b


def check_image_pair(reference, test):
    """Return both images as float64 arrays after a shape check."""
    ref, tst = check_same_shape(reference, test, "images")
    check_finite(ref, "reference image")
    check_finite(tst, "test image")
    return ref.astype(np.float64), tst.astype(np.float64)
