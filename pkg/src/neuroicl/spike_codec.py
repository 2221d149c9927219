"""Normalization to [0, 1], zero padding, Bernoulli spike encoding and
stochastic-computing primitives on bit streams.

Streams are handled as boolean numpy arrays at the API surface.  Bulk AND and
popcount work on bits packed 64 per ``uint64`` word.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import Constellation

_TOL = 1e-12


class ContractViolation(ValueError):
    pass


@dataclass(frozen=True)
class SpikeTensor:
    """Binary tensor indexed ``(t, d, m)``: time step, feature, token."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError("SpikeTensor data must be (T, D, M)")
        if data.dtype != np.bool_:
            if not np.isin(data, (0, 1)).all():
                raise ValueError("SpikeTensor entries must be 0 or 1")
            data = data.astype(np.bool_)
        if data.shape[0] < 1:
            raise ValueError("SpikeTensor needs T >= 1")
        object.__setattr__(self, "data", data)

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def rate(self) -> np.ndarray:
        """Per-(d, m) firing rate over time."""
        return self.data.mean(axis=0)

    def to_text(self) -> str:
        """0/1 grid per time step, one row per feature, tokens across."""
        blocks = []
        for t in range(self.T):
            rows = ["".join("1" if b else "0" for b in row) for row in self.data[t]]
            blocks.append(f"t={t + 1}\n" + "\n".join(rows))
        return "\n".join(blocks)


def normalize_received(y: np.ndarray, l_min: float, l_max: float) -> np.ndarray:
    """``([Re y; Im y] - l_min) / (l_max - l_min)``, applied over the last axis."""
    y = np.asarray(y, dtype=np.complex128)
    yr = np.concatenate([y.real, y.imag], axis=-1)
    if np.any(yr < l_min - _TOL) or np.any(yr > l_max + _TOL):
        raise ContractViolation("received signal outside the quantizer range")
    return np.clip((yr - l_min) / (l_max - l_min), 0.0, 1.0)


def denormalize_received(v: np.ndarray, l_min: float, l_max: float) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1] // 2
    yr = l_min + v * (l_max - l_min)
    return yr[..., :n] + 1j * yr[..., n:]


def normalize_symbols(s: np.ndarray, constellation: Constellation) -> np.ndarray:
    """Affine map of ``[Re s; Im s]`` from ``[-a, a]`` to ``[0, 1]``, with ``a``
    the constellation's largest coordinate magnitude."""
    s = np.asarray(s, dtype=np.complex128)
    a = constellation.amplitude
    sr = np.concatenate([s.real, s.imag], axis=-1)
    return np.clip((sr + a) / (2 * a), 0.0, 1.0)


def zero_pad(v: np.ndarray, d_t: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] > d_t:
        raise ValueError(f"vector of length {v.shape[-1]} does not fit in d_t={d_t}")
    pad = [(0, 0)] * (v.ndim - 1) + [(0, d_t - v.shape[-1])]
    return np.pad(v, pad)


def bernoulli_encode(v: np.ndarray, T: int, rng: np.random.Generator) -> SpikeTensor:
    """Encode a ``(D,)`` vector or ``(D, M)`` matrix in [0, 1] as T i.i.d. Bernoulli draws."""
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < -_TOL) or np.any(v > 1 + _TOL):
        raise ContractViolation("Bernoulli probabilities must lie in [0, 1]")
    if v.ndim == 1:
        v = v[:, None]
    return SpikeTensor(rng.random((T,) + v.shape) < v)


def pack_stream(bits: np.ndarray) -> np.ndarray:
    """Pack a 1-D bit stream into ``uint64`` words (zero padded)."""
    packed = np.packbits(np.asarray(bits, dtype=np.bool_))
    pad = (-packed.size) % 8
    if pad:
        packed = np.concatenate([packed, np.zeros(pad, dtype=np.uint8)])
    return packed.view(np.uint64)


def unpack_stream(words: np.ndarray, n: int) -> np.ndarray:
    return np.unpackbits(np.asarray(words, dtype=np.uint64).view(np.uint8))[:n].astype(np.bool_)


def stochastic_and_multiply(x_stream: np.ndarray, y_stream: np.ndarray) -> np.ndarray:
    """Bitwise AND of two equal-length streams; for independent Bernoulli inputs
    the output is Bernoulli with the product of the input probabilities."""
    x_stream = np.asarray(x_stream)
    y_stream = np.asarray(y_stream)
    if x_stream.shape != y_stream.shape or x_stream.ndim != 1:
        raise ValueError("streams must be 1-D with equal length")
    words = pack_stream(x_stream) & pack_stream(y_stream)
    return unpack_stream(words, x_stream.size)


def and_count(x_stream: np.ndarray, y_stream: np.ndarray) -> int:
    """Popcount of ``x AND y`` computed on packed words."""
    if len(x_stream) != len(y_stream):
        raise ValueError("streams must have equal length")
    return int(np.bitwise_count(pack_stream(x_stream) & pack_stream(y_stream)).sum())


def stream_mean(stream: np.ndarray) -> float:
    stream = np.asarray(stream)
    if stream.size == 0:
        raise ValueError("empty stream")
    return float(stream.mean())
