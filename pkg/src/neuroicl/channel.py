"""Fading MIMO link with AWGN and a clipping uniform quantizer.

All sampling goes through an explicit ``numpy.random.Generator`` so every
draw is reproducible from a seed.  Symbols are carried both as complex
values and as integer indices into the constellation; the indices are what
the detectors are trained to recover.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ConfigurationError(ValueError):
    """Raised for invalid channel or quantizer parameters."""


@dataclass(frozen=True)
class Constellation:
    symbols: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        syms = np.asarray(self.symbols, dtype=np.complex128).reshape(-1)
        if syms.size == 0:
            raise ConfigurationError("constellation must contain at least one symbol")
        object.__setattr__(self, "symbols", syms)

    @property
    def K(self) -> int:
        return int(self.symbols.size)

    @property
    def amplitude(self) -> float:
        """Largest |Re| or |Im| over the symbol set."""
        return float(max(np.abs(self.symbols.real).max(), np.abs(self.symbols.imag).max()))

    def index_of(self, s: np.ndarray) -> np.ndarray:
        """Map complex symbols back to constellation indices (exact match within 1e-9)."""
        s = np.asarray(s, dtype=np.complex128)
        dist = np.abs(s[..., None] - self.symbols)
        idx = dist.argmin(axis=-1)
        if np.any(dist.min(axis=-1) > 1e-9):
            raise ValueError("symbol not in constellation")
        return idx


def qpsk() -> Constellation:
    """QPSK, indexed counter-clockwise from the first quadrant.

    Index order is 0: (1+j), 1: (-1+j), 2: (-1-j), 3: (1-j), all over sqrt(2).
    """
    pts = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / math.sqrt(2)
    return Constellation(pts, name="qpsk")


CONSTELLATIONS = {"qpsk": qpsk}


def get_constellation(name: str) -> Constellation:
    try:
        return CONSTELLATIONS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown constellation {name!r}") from None


@dataclass(frozen=True)
class Task:
    H: np.ndarray
    sigma2: float
    snr_db: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.H)):
            raise ConfigurationError("channel matrix must be finite")
        if self.sigma2 < 0 or (self.sigma2 == 0 and not math.isinf(self.snr_db)):
            raise ConfigurationError("sigma2 must be positive unless snr_db is +inf")

    @property
    def n_r(self) -> int:
        return self.H.shape[0]

    @property
    def n_t(self) -> int:
        return self.H.shape[1]


@dataclass(frozen=True)
class QuantizerSpec:
    bits: int = 4
    l_min: float = -4.0
    l_max: float = 4.0

    def __post_init__(self):
        if self.bits < 1:
            raise ConfigurationError("quantizer needs at least one bit")
        if not self.l_min < self.l_max:
            raise ConfigurationError("quantizer range must satisfy l_min < l_max")

    @property
    def n_levels(self) -> int:
        return 2**self.bits

    @property
    def step(self) -> float:
        return (self.l_max - self.l_min) / (self.n_levels - 1)

    def levels(self) -> np.ndarray:
        return self.l_min + self.step * np.arange(self.n_levels)


@dataclass(frozen=True)
class ChannelConfig:
    n_t: int = 2
    n_r: int = 2
    constellation: str = "qpsk"
    quant_bits: int = 4
    quant_l_min: float = -4.0
    quant_l_max: float = 4.0
    snr_db_range: tuple[float, float] = (0.0, 30.0)
    n_pilots: int = 20

    def __post_init__(self):
        if self.n_t < 1 or self.n_r < 1:
            raise ConfigurationError("antenna counts must be >= 1")
        lo, hi = self.snr_db_range
        if lo > hi:
            raise ConfigurationError("snr_db_range must be increasing")
        if self.n_pilots < 0:
            raise ConfigurationError("n_pilots must be >= 0")
        self.quantizer  # validates

    @property
    def quantizer(self) -> "QuantizerSpec":
        return QuantizerSpec(self.quant_bits, self.quant_l_min, self.quant_l_max)

    @property
    def constellation_obj(self) -> Constellation:
        return get_constellation(self.constellation)

    @property
    def n_classes(self) -> int:
        return self.constellation_obj.K ** self.n_t


def snr_to_sigma2(snr_db: float, n_t: int) -> float:
    """Noise variance per complex receive entry for a given SNR.

    Per-antenna received signal power is ``n_t`` (unit-variance channel gains,
    unit-power symbols), so ``sigma2 = n_t * 10**(-snr/10)``.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return n_t * 10.0 ** (-snr_db / 10.0)


def sample_task(
    rng: np.random.Generator,
    snr_range_db: tuple[float, float] = (0.0, 30.0),
    n_t: int = 2,
    n_r: int = 2,
    snr_db: float | None = None,
) -> Task:
    """Draw H with i.i.d. CN(0,1) entries and an SNR uniform over ``snr_range_db``.

    Passing ``snr_db`` pins the SNR (the channel is still random).
    """
    lo, hi = snr_range_db
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
        raise ConfigurationError(f"invalid SNR range {snr_range_db!r}")
    if n_t < 1 or n_r < 1:
        raise ConfigurationError("antenna counts must be >= 1")
    H = (rng.standard_normal((n_r, n_t)) + 1j * rng.standard_normal((n_r, n_t))) / math.sqrt(2)
    snr = float(rng.uniform(lo, hi)) if snr_db is None else float(snr_db)
    return Task(H=H, sigma2=snr_to_sigma2(snr, n_t), snr_db=snr)


def sample_symbol_indices(rng: np.random.Generator, shape, constellation: Constellation) -> np.ndarray:
    return rng.integers(0, constellation.K, size=shape)


def sample_symbols(rng: np.random.Generator, n_t: int, constellation: Constellation) -> np.ndarray:
    """One transmit vector with entries uniform over the constellation."""
    return constellation.symbols[sample_symbol_indices(rng, n_t, constellation)]


def apply_channel(task: Task, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``H s + n`` for one vector (shape ``(n_t,)``) or a stack (shape ``(..., n_t)``).

    The noise has total variance ``sigma2`` per complex entry, split evenly
    between real and imaginary parts.
    """
    s = np.asarray(s, dtype=np.complex128)
    if s.shape[-1] != task.n_t:
        raise ValueError(f"symbol vector length {s.shape[-1]} does not match n_t={task.n_t}")
    clean = s @ task.H.T
    scale = math.sqrt(task.sigma2 / 2.0)
    noise = scale * (rng.standard_normal(clean.shape) + 1j * rng.standard_normal(clean.shape))
    return clean + noise


def _quantize_real(x: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    top = spec.n_levels - 1
    x = np.clip(x, spec.l_min, spec.l_max)
    k = np.floor((x - spec.l_min) * top / (spec.l_max - spec.l_min) + 0.5)
    k = np.clip(k, 0, top)
    return spec.l_min + k * spec.step


def quantize(y: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Clip real and imaginary parts to ``[l_min, l_max]`` and snap each to the
    nearest of the ``2**bits`` uniform levels; exact ties go to the upper level."""
    y = np.asarray(y)
    if np.iscomplexobj(y):
        return _quantize_real(y.real, spec) + 1j * _quantize_real(y.imag, spec)
    return _quantize_real(y.astype(np.float64), spec)


@dataclass
class Context:
    """N pilot pairs plus a query, all from one task.

    ``pilot_s`` is ``(N, n_t)`` complex, ``pilot_y`` is ``(N, n_r)`` complex.
    ``true_idx`` holds the constellation indices of ``true_s`` (labels).
    """

    pilot_s: np.ndarray
    pilot_y: np.ndarray
    query_y: np.ndarray
    true_s: np.ndarray
    pilot_idx: np.ndarray = field(default=None, repr=False)
    true_idx: np.ndarray = field(default=None, repr=False)

    @property
    def n_pilots(self) -> int:
        return self.pilot_s.shape[0]

    @property
    def pilots(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.pilot_s, self.pilot_y))


@dataclass
class ContextBatch:
    """Many contexts stacked along axis 0.

    ``s_idx`` is ``(B, N+1, n_t)`` with the query symbol last; ``y`` is
    ``(B, N+1, n_r)`` quantized receive vectors with the query last.  Each row
    may come from a different task; ``task_id`` tracks which.
    """

    s_idx: np.ndarray
    y: np.ndarray
    task_id: np.ndarray

    def __len__(self) -> int:
        return self.s_idx.shape[0]

    @property
    def n_pilots(self) -> int:
        return self.s_idx.shape[1] - 1

    @property
    def labels_idx(self) -> np.ndarray:
        return self.s_idx[:, -1, :]

    def context(self, i: int, constellation: Constellation) -> Context:
        s = constellation.symbols[self.s_idx[i]]
        return Context(
            pilot_s=s[:-1],
            pilot_y=self.y[i, :-1],
            query_y=self.y[i, -1],
            true_s=s[-1],
            pilot_idx=self.s_idx[i, :-1],
            true_idx=self.s_idx[i, -1],
        )

    @staticmethod
    def concat(batches: list["ContextBatch"]) -> "ContextBatch":
        return ContextBatch(
            s_idx=np.concatenate([b.s_idx for b in batches]),
            y=np.concatenate([b.y for b in batches]),
            task_id=np.concatenate([b.task_id for b in batches]),
        )

    def subset(self, rows) -> "ContextBatch":
        return ContextBatch(self.s_idx[rows], self.y[rows], self.task_id[rows])


def generate_contexts(
    task: Task,
    n_pilots: int,
    n_contexts: int,
    rng: np.random.Generator,
    quantizer: QuantizerSpec,
    constellation: Constellation,
    task_id: int = 0,
) -> ContextBatch:
    """``n_contexts`` i.i.d. contexts (pilots + query) under one task."""
    if n_pilots < 0:
        raise ValueError("n_pilots must be >= 0")
    idx = sample_symbol_indices(rng, (n_contexts, n_pilots + 1, task.n_t), constellation)
    y = quantize(apply_channel(task, constellation.symbols[idx], rng), quantizer)
    return ContextBatch(s_idx=idx, y=y, task_id=np.full(n_contexts, task_id, dtype=np.int64))


def generate_context(
    task: Task,
    n_pilots: int,
    rng: np.random.Generator,
    quantizer: QuantizerSpec,
    constellation: Constellation | None = None,
) -> Context:
    constellation = constellation or qpsk()
    batch = generate_contexts(task, n_pilots, 1, rng, quantizer, constellation)
    return batch.context(0, constellation)


# Flat layout: s_1, y_1, ..., s_N, y_N, y_query, s_query; each complex entry
# stored as (real, imag).
def context_to_array(ctx: Context) -> np.ndarray:
    parts = []
    for s, y in ctx.pilots:
        parts += [s, y]
    parts += [ctx.query_y, ctx.true_s]
    flat = np.concatenate([np.asarray(p, dtype=np.complex128) for p in parts])
    return np.stack([flat.real, flat.imag], axis=-1).reshape(-1)


def context_from_array(arr: np.ndarray, n_pilots: int, n_t: int, n_r: int) -> Context:
    arr = np.asarray(arr, dtype=np.float64)
    expected = 2 * (n_pilots * (n_t + n_r) + n_r + n_t)
    if arr.size != expected:
        raise ValueError(f"expected {expected} values, got {arr.size}")
    z = arr[0::2] + 1j * arr[1::2]
    pair = n_t + n_r
    blocks = z[: n_pilots * pair].reshape(n_pilots, pair)
    tail = z[n_pilots * pair:]
    return Context(
        pilot_s=blocks[:, :n_t],
        pilot_y=blocks[:, n_t:],
        query_y=tail[:n_r],
        true_s=tail[n_r:],
    )


def context_csv_header(n_pilots: int, n_t: int, n_r: int) -> list[str]:
    cols = []

    def add(prefix, n):
        for k in range(n):
            cols.extend([f"{prefix}_{k}_re", f"{prefix}_{k}_im"])

    for i in range(1, n_pilots + 1):
        add(f"s{i}", n_t)
        add(f"y{i}", n_r)
    add("yq", n_r)
    add("sq", n_t)
    return cols
