"""Joint-symbol class indices and the QPSK Gray bit map used for BER."""

from __future__ import annotations

import numpy as np

from .channel import Constellation

# Gray labels for qpsk() index order: first bit = sign of Re, second = sign of Im.
QPSK_GRAY_BITS = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=np.int8)


def class_index_from_indices(idx: np.ndarray, K: int) -> np.ndarray:
    """Mixed-radix index ``sum_i idx[..., i] * K**i`` (antenna 0 is least significant)."""
    idx = np.asarray(idx, dtype=np.int64)
    weights = K ** np.arange(idx.shape[-1], dtype=np.int64)
    return (idx * weights).sum(axis=-1)


def class_index(s: np.ndarray, constellation: Constellation) -> int:
    """Class label of a complex symbol vector; raises if a symbol is off-constellation."""
    return int(class_index_from_indices(constellation.index_of(s), constellation.K))


def indices_from_class(c: np.ndarray, n_t: int, K: int) -> np.ndarray:
    c = np.asarray(c, dtype=np.int64)
    digits = (c[..., None] // (K ** np.arange(n_t, dtype=np.int64))) % K
    return digits


def symbols_from_class(c: int, n_t: int, constellation: Constellation) -> np.ndarray:
    return constellation.symbols[indices_from_class(c, n_t, constellation.K)]


def bit_errors(pred_idx: np.ndarray, true_idx: np.ndarray, bit_map: np.ndarray = QPSK_GRAY_BITS) -> np.ndarray:
    """Per-vector count of wrong bits between per-antenna symbol indices."""
    diff = bit_map[np.asarray(pred_idx)] != bit_map[np.asarray(true_idx)]
    return diff.sum(axis=(-1, -2))
