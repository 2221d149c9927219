"""Linear MMSE detector with perfect knowledge of the channel and noise level."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import Constellation, Task
from .labels import class_index_from_indices


@dataclass
class MmseSolution:
    soft_estimate: np.ndarray
    hard_decision: np.ndarray
    symbol_idx: np.ndarray
    class_index: np.ndarray


def mmse_equalize(H: np.ndarray, sigma2: float, y: np.ndarray) -> np.ndarray:
    """``H^H (H H^H + sigma2 I)^{-1} y`` for unit-power symbols.

    ``y`` may be one vector ``(n_r,)`` or a stack ``(..., n_r)``.  A singular
    Gram matrix (only possible at ``sigma2 == 0``) falls back to the
    pseudo-inverse.
    """
    H = np.asarray(H, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    if y.shape[-1] != H.shape[0]:
        raise ValueError("y length does not match H rows")
    gram = H @ H.conj().T + sigma2 * np.eye(H.shape[0])
    try:
        if np.linalg.cond(gram) > 1e12:
            raise np.linalg.LinAlgError
        W = H.conj().T @ np.linalg.inv(gram)
    except np.linalg.LinAlgError:
        W = np.linalg.pinv(H)
    return y @ W.T


def mmse_equalize_batch(H: np.ndarray, sigma2: float, y: np.ndarray) -> np.ndarray:
    """``mmse_equalize`` over a stack of tasks: ``H (B, n_r, n_t)``, ``y (B, Q, n_r)``."""
    H = np.asarray(H, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    Hh = np.conj(np.swapaxes(H, -1, -2))
    if sigma2 > 0:
        gram = H @ Hh + sigma2 * np.eye(H.shape[-2])
        return np.swapaxes(Hh @ np.linalg.solve(gram, np.swapaxes(y, -1, -2)), -1, -2)
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    return np.einsum("btr,bqr->bqt", np.linalg.pinv(H), y)


def hard_decide(soft: np.ndarray, constellation: Constellation) -> tuple[np.ndarray, np.ndarray]:
    """Per-entry nearest constellation point; ties go to the lowest symbol index.

    Returns ``(symbols, indices)``.
    """
    soft = np.asarray(soft, dtype=np.complex128)
    d = np.abs(soft[..., None] - constellation.symbols)
    idx = d.argmin(axis=-1)
    return constellation.symbols[idx], idx


def mmse_detect(task: Task, y: np.ndarray, constellation: Constellation) -> MmseSolution:
    soft = mmse_equalize(task.H, task.sigma2, y)
    hard, idx = hard_decide(soft, constellation)
    return MmseSolution(soft, hard, idx, class_index_from_indices(idx, constellation.K))
