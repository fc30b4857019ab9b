"""Shared builders for the test suites."""

import numpy as np

from logshe import LogSheModel, build_knn, simulate


def knn_weights(n, k=5, seed=0):
    pts = np.random.default_rng([seed, 99]).random((n, 2))
    return build_knn(pts, k)


def small_dataset(kind, n=25, seed=0, theta=(0.3, 0.5, 0.8, 0.4), errors=None):
    W = knn_weights(n, min(3, n - 1), seed=seed)
    model = LogSheModel.create(kind, W)
    data = simulate(model, list(theta), errors, seed=seed + 100)
    return model, data
