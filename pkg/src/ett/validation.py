"""Input checks shared by the estimator and the engine."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d


def check_images(X, config):
    """Validate a (n, C, H, W) float image batch for ``config``."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim == 3:
        X = X[None]
    expected = (config.channels, config.image_size, config.image_size)
    if X.ndim != 4 or X.shape[1:] != expected:
        raise ValueError(f"expected images of shape (n, {', '.join(map(str, expected))}), "
                         f"got {X.shape}")
    return X


def check_support(y, n_samples):
    """Encode support labels to 0..N-1; returns (encoded, classes)."""
    y = column_or_1d(y, warn=False)
    if len(y) != n_samples:
        raise ValueError(f"{n_samples} images but {len(y)} labels")
    classes, encoded = np.unique(y, return_inverse=True)
    return encoded.astype(np.int64), classes
