"""Shared helpers: labelled RNG streams and small numeric utilities."""

from __future__ import annotations

import numpy as np

# Labelled spawn keys so every consumer of randomness inside a run gets an
# independent, reproducible stream derived from the single run seed.
STREAM_CLASS_MEANS = 0
STREAM_TRAIN_NOISE = 1
STREAM_TEST_NOISE = 2
STREAM_INIT = 10
STREAM_BATCH = 11
STREAM_RETRAIN_INIT = 12
STREAM_RETRAIN_BATCH = 13
STREAM_POSTERIOR = 14
STREAM_JITTER = 15
STREAM_ANALYSIS = 16
STREAM_ENSEMBLE = 17
STREAM_MIXUP = 18


def rng_stream(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for (seed, stream); same pair always reproduces."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


def round_half_up(x):
    """Round with ties away from the floor (0.5 -> 1), unlike banker's rounding."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if window < 1 or window > v.size:
        raise ValueError("window must be in [1, len(values)]")
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")
