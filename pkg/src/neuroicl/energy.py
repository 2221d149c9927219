"""Operation counting and energy accounting for the two detector variants.

Counts come in two independent flavours.  ``count_ops_ann`` and
``count_ops_snn`` evaluate closed forms from the model dimensions (and, for
the spiking model, measured firing rates).  ``OpCounter`` is an observer that
tallies the same categories from the tensors seen during a real forward
pass.  On a single inference with rates measured on that same inference the
two agree exactly, which the tests exploit.

Accounting rules
----------------
Dense model: every multiply-accumulate is one 8-bit multiply plus one 8-bit
add; it reads one 8-bit activation operand, and every produced activation is
written once at 8 bits.  Softmax, normalization and ReLU arithmetic are not
charged.

Spiking model, per time step: each incoming spike costs one add per fan-out
synapse and a 1-bit read; each LIF neuron costs a leak multiply, an
integrating add and a threshold compare plus an 8-bit read and write of its
membrane; every emitted spike is written as one bit.  The channel affine
after each residual costs add, multiply and add per element.  Attention costs
two AND gates and two counter increments per allowed pair and key dimension
and one Bernoulli draw per attention bit and per output bit; its operands
stream from registers, so only the emitted bits reach memory.

Both variants read each weight once per inference at 8 bits.  Memory traffic
is tracked in bits and priced per byte.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping

import torch

from .transformer import ICLTransformer, ModelConfig, Observer, attention_mask

__all__ = [
    "OpCounts",
    "EnergyConstants",
    "EnergyBreakdown",
    "EnergyReport",
    "OpCounter",
    "RateRecorder",
    "count_ops_ann",
    "count_ops_snn",
    "measure_sparsity",
    "instrumented_counts",
    "energy_of",
    "energy_report",
    "write_energy_csv",
    "write_constants_csv",
    "ENERGY_CSV_COLUMNS",
]

WEIGHT_BITS = 8
STATE_BITS = 8
ACT_BITS = 8

Number = int | Fraction


@dataclass
class OpCounts:
    int8_mult: Number = 0
    int8_add: Number = 0
    comparator: Number = 0
    and_gate: Number = 0
    counter_inc: Number = 0
    rng_bernoulli: Number = 0
    weight_read_bits: Number = 0
    act_read_bits: Number = 0
    state_read_bits: Number = 0
    act_write_bits: Number = 0
    state_write_bits: Number = 0

    def __add__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def scaled(self, k) -> "OpCounts":
        return OpCounts(**{f.name: getattr(self, f.name) * k for f in fields(self)})

    def as_dict(self) -> dict[str, Number]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def read_bits(self) -> Number:
        return self.weight_read_bits + self.act_read_bits + self.state_read_bits

    @property
    def write_bits(self) -> Number:
        return self.act_write_bits + self.state_write_bits

    @property
    def sram_read_bytes(self) -> Fraction:
        return Fraction(self.read_bits) / 8

    @property
    def sram_write_bytes(self) -> Fraction:
        return Fraction(self.write_bits) / 8

    @property
    def activation_traffic_bits(self) -> Number:
        return self.act_read_bits + self.act_write_bits

    @classmethod
    def total(cls, parts: Iterable["OpCounts"]) -> "OpCounts":
        out = cls()
        for p in parts:
            out = out + p
        return out


# --------------------------------------------------------------------------
# Constants


_DEFAULT_CONSTANTS = {
    "int8_add": (0.03, "8-bit integer add, 45 nm CMOS survey figure"),
    "int8_mult": (0.2, "8-bit integer multiply, 45 nm CMOS survey figure"),
    "and_gate": (0.003, "single 2-input AND gate switching event, order-of-magnitude estimate"),
    "counter_inc": (0.03, "increment of an 8-bit counter, taken equal to an 8-bit add"),
    "rng_bernoulli": (0.1, "one Bernoulli draw from an LFSR plus comparator, estimate"),
    "comparator": (0.03, "8-bit threshold compare, taken equal to an 8-bit add"),
    "sram_read_byte": (1.25, "small on-chip SRAM access per byte, 45 nm estimate"),
    "sram_write_byte": (1.25, "small on-chip SRAM access per byte, 45 nm estimate"),
}


@dataclass
class EnergyConstants:
    """Per-operation energies in picojoules, each with a provenance note."""

    int8_add: float = _DEFAULT_CONSTANTS["int8_add"][0]
    int8_mult: float = _DEFAULT_CONSTANTS["int8_mult"][0]
    and_gate: float = _DEFAULT_CONSTANTS["and_gate"][0]
    counter_inc: float = _DEFAULT_CONSTANTS["counter_inc"][0]
    rng_bernoulli: float = _DEFAULT_CONSTANTS["rng_bernoulli"][0]
    comparator: float = _DEFAULT_CONSTANTS["comparator"][0]
    sram_read_byte: float = _DEFAULT_CONSTANTS["sram_read_byte"][0]
    sram_write_byte: float = _DEFAULT_CONSTANTS["sram_write_byte"][0]
    provenance: dict[str, str] = field(default_factory=lambda: {k: v[1] for k, v in _DEFAULT_CONSTANTS.items()})

    def __post_init__(self):
        for name in _DEFAULT_CONSTANTS:
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ValueError(f"energy constant {name} must be a finite non-negative number")

    @classmethod
    def from_mapping(cls, d: Mapping) -> "EnergyConstants":
        """Accept ``name = value`` or ``name = {value = .., source = ..}`` entries."""
        unknown = set(d) - set(_DEFAULT_CONSTANTS)
        if unknown:
            raise ValueError(f"unknown energy constants: {sorted(unknown)}")
        kwargs, prov = {}, {k: v[1] for k, v in _DEFAULT_CONSTANTS.items()}
        for k, v in d.items():
            if isinstance(v, Mapping):
                extra = set(v) - {"value", "source"}
                if extra or "value" not in v:
                    raise ValueError(f"energy constant {k} needs 'value' and optional 'source'")
                kwargs[k] = float(v["value"])
                prov[k] = str(v.get("source", "user supplied"))
            else:
                kwargs[k] = float(v)
                prov[k] = "user supplied"
        return cls(**kwargs, provenance=prov)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in _DEFAULT_CONSTANTS}


@dataclass
class EnergyBreakdown:
    compute_pj: float
    memory_pj: float

    @property
    def total_pj(self) -> float:
        return self.compute_pj + self.memory_pj


def energy_of(counts: OpCounts, k: EnergyConstants) -> EnergyBreakdown:
    compute = (
        float(counts.int8_add) * k.int8_add
        + float(counts.int8_mult) * k.int8_mult
        + float(counts.comparator) * k.comparator
        + float(counts.and_gate) * k.and_gate
        + float(counts.counter_inc) * k.counter_inc
        + float(counts.rng_bernoulli) * k.rng_bernoulli
    )
    memory = float(counts.sram_read_bytes) * k.sram_read_byte + float(counts.sram_write_bytes) * k.sram_write_byte
    return EnergyBreakdown(compute, memory)


# --------------------------------------------------------------------------
# Closed forms


def _allowed_pairs(M: int, mask_mode: str) -> int:
    return int(attention_mask(M, mask_mode).sum())


def weight_count(c: ModelConfig, M: int) -> int:
    """Weights touched by one inference over ``M`` tokens."""
    per_layer = 3 * c.d_e * c.d_e + 2 * c.d_e * c.d_h + 4 * c.d_e
    pos = M * c.d_e if c.positional else 0
    return c.d_e * c.d_t + pos + c.n_layers * per_layer + c.n_classes * c.d_e


def _weights(c: ModelConfig, M: int) -> OpCounts:
    return OpCounts(weight_read_bits=WEIGHT_BITS * weight_count(c, M))


def _dense(n_mac: Number, n_out: Number) -> OpCounts:
    return OpCounts(int8_mult=n_mac, int8_add=n_mac, act_read_bits=ACT_BITS * n_mac, act_write_bits=ACT_BITS * n_out)


def count_ops_ann(config: ModelConfig, M: int, breakdown: bool = False):
    """Per-inference counts of the dense model on ``M`` tokens."""
    c = config
    P = _allowed_pairs(M, c.mask_mode)
    parts: dict[str, OpCounts] = {"weights": _weights(c, M)}
    embed = _dense(M * c.d_t * c.d_e, M * c.d_e)
    if c.positional:
        embed = embed + OpCounts(int8_add=M * c.d_e)
    parts["embed"] = embed
    for l in range(c.n_layers):
        layer = _dense(3 * M * c.d_e * c.d_e, 3 * M * c.d_e)
        layer = layer + _dense(P * c.d_e, P * c.n_heads) + _dense(P * c.d_e, M * c.d_e)
        layer = layer + OpCounts(act_write_bits=ACT_BITS * M * c.d_e)
        layer = layer + _dense(M * c.d_e * c.d_h, M * c.d_h) + _dense(M * c.d_h * c.d_e, M * c.d_e)
        layer = layer + OpCounts(act_write_bits=ACT_BITS * M * c.d_e)
        parts[f"layer{l}"] = layer
    parts["out"] = _dense(M * c.d_e * c.n_classes, M * c.n_classes)
    total = OpCounts.total(parts.values())
    return (total, parts) if breakdown else total


def snn_site_sizes(c: ModelConfig, M: int) -> dict[str, int]:
    """Slots per time step for every site whose firing rate matters."""
    P = _allowed_pairs(M, c.mask_mode)
    sizes = {"embed.in": M * c.d_t, "embed": M * c.d_e}
    for l in range(c.n_layers):
        for name in ("q", "k", "v", "norm1", "norm2"):
            sizes[f"layer{l}.{name}"] = M * c.d_e
        sizes[f"layer{l}.ffn1"] = M * c.d_h
        sizes[f"layer{l}.attn"] = P * c.n_heads
        sizes[f"layer{l}.mssa"] = M * c.d_e
    return sizes


def _lif(n: Number, spikes: Number) -> OpCounts:
    return OpCounts(int8_mult=n, int8_add=n, comparator=n, state_read_bits=STATE_BITS * n,
                    state_write_bits=STATE_BITS * n, act_write_bits=spikes)


def _synapse(events: Number, fan_out: int) -> OpCounts:
    return OpCounts(int8_add=events * fan_out, act_read_bits=events * fan_out)


def _affine(n: Number) -> OpCounts:
    return OpCounts(int8_add=2 * n, int8_mult=n)


SNN_CATEGORIES = ("weights", "encoding", "position", "synapse", "neuron", "affine", "attention", "readout")


def count_ops_snn(config: ModelConfig, M: int, rates: Mapping[str, Number], breakdown: bool = False):
    """Per-inference counts of the spiking model given per-site firing rates.

    ``rates`` maps every key of ``snn_site_sizes`` to the fraction of slots
    that spiked.  Exact ``Fraction`` rates give exact counts.  With
    ``breakdown`` the per-category parts (``SNN_CATEGORIES``) are returned too.
    """
    c = config
    sizes = snn_site_sizes(c, M)
    if set(sizes) != set(rates):
        raise ValueError(f"firing rates must cover exactly the sites {sorted(sizes)}; "
                         f"missing {sorted(set(sizes) - set(rates))}, unexpected {sorted(set(rates) - set(sizes))}")
    for k, r in rates.items():
        if not 0 <= r <= 1:
            raise ValueError(f"firing rate for {k} must lie in [0, 1]")
    P = _allowed_pairs(M, c.mask_mode)
    ev = {k: Fraction(rates[k]) * sizes[k] for k in sizes}
    step = {k: OpCounts() for k in SNN_CATEGORIES if k != "weights"}

    def put(cat, counts):
        step[cat] = step[cat] + counts

    put("encoding", OpCounts(rng_bernoulli=M * c.d_t, act_write_bits=ev["embed.in"]))
    if c.positional:
        put("position", OpCounts(int8_add=M * c.d_e))
    put("synapse", _synapse(ev["embed.in"], c.d_e))
    put("neuron", _lif(M * c.d_e, ev["embed"]))
    prev = "embed"
    for l in range(c.n_layers):
        s = f"layer{l}"
        put("synapse", _synapse(ev[prev], 3 * c.d_e))
        for name in ("q", "k", "v"):
            put("neuron", _lif(M * c.d_e, ev[f"{s}.{name}"]))
        ands = 2 * P * c.d_e
        put("attention", OpCounts(and_gate=ands, counter_inc=ands, rng_bernoulli=P * c.n_heads + M * c.d_e,
                                  act_write_bits=ev[f"{s}.attn"] + ev[f"{s}.mssa"]))
        put("affine", _affine(M * c.d_e))
        put("neuron", _lif(M * c.d_e, ev[f"{s}.norm1"]))
        put("synapse", _synapse(ev[f"{s}.norm1"], c.d_h))
        put("neuron", _lif(M * c.d_h, ev[f"{s}.ffn1"]))
        put("synapse", _synapse(ev[f"{s}.ffn1"], c.d_e))
        put("affine", _affine(M * c.d_e))
        put("neuron", _lif(M * c.d_e, ev[f"{s}.norm2"]))
        prev = f"{s}.norm2"
    n_acc = M * c.n_classes
    put("synapse", _synapse(ev[prev], c.n_classes))
    put("readout", OpCounts(state_read_bits=STATE_BITS * n_acc, state_write_bits=STATE_BITS * n_acc))
    parts = {"weights": _weights(c, M), **{k: v.scaled(c.T) for k, v in step.items()}}
    total = OpCounts.total(parts.values())
    return (total, parts) if breakdown else total


# --------------------------------------------------------------------------
# Instrumentation


def _n(x) -> int:
    return int(x.detach().sum().item()) if isinstance(x, torch.Tensor) else int(x)


class OpCounter(Observer):
    """Tallies ``OpCounts`` from the tensors reported during forward passes."""

    def __init__(self):
        self.counts = OpCounts()
        self.inferences = 0
        self.site_macs: dict[str, int] = {}

    def _add(self, **kw):
        self.counts = self.counts + OpCounts(**kw)

    def read_weights(self, model: ICLTransformer, M: int, batch: int = 1) -> None:
        n = 0
        for name, p in model.named_parameters():
            n += M * p.shape[1] if name == "pos" else p.numel()
        self._add(weight_read_bits=WEIGHT_BITS * n * batch)
        self.inferences += batch

    def synapse(self, site, x, fan_out):
        ev = _n(x) * fan_out
        self._add(int8_add=ev, act_read_bits=ev)

    def neurons(self, site, s):
        n = s.numel()
        self._add(int8_mult=n, int8_add=n, comparator=n, state_read_bits=STATE_BITS * n,
                  state_write_bits=STATE_BITS * n, act_write_bits=_n(s))

    def affine(self, site, x):
        n = x.numel()
        self._add(int8_add=2 * n, int8_mult=n)

    def bernoulli(self, site, bits):
        self._add(rng_bernoulli=bits.numel(), act_write_bits=_n(bits))

    def attention(self, site, q, k, v, a, f, allowed):
        B, h, M, d_k = q.shape
        pairs = B * h * int(allowed.sum())
        ands = 2 * pairs * d_k
        self._add(and_gate=ands, counter_inc=ands, rng_bernoulli=pairs + f.numel(), act_write_bits=_n(a) + _n(f))

    def add(self, site, x):
        self._add(int8_add=x.numel())

    def accumulate(self, site, n_values):
        self._add(state_read_bits=STATE_BITS * n_values, state_write_bits=STATE_BITS * n_values)

    def mac(self, site, n_mac, n_out):
        self.site_macs[site] = self.site_macs.get(site, 0) + n_mac
        self._add(int8_mult=n_mac, int8_add=n_mac, act_read_bits=ACT_BITS * n_mac, act_write_bits=ACT_BITS * n_out)

    def write(self, site, n_values):
        self._add(act_write_bits=ACT_BITS * n_values)

    def per_inference(self) -> OpCounts:
        return self.counts.scaled(Fraction(1, max(self.inferences, 1)))


class RateRecorder(Observer):
    """Counts spikes and slots per site across forward passes."""

    def __init__(self):
        self.spikes: dict[str, int] = {}
        self.slots: dict[str, int] = {}

    def _rec(self, site: str, spikes: int, slots: int):
        self.spikes[site] = self.spikes.get(site, 0) + spikes
        self.slots[site] = self.slots.get(site, 0) + slots

    def neurons(self, site, s):
        self._rec(site, _n(s), s.numel())

    def bernoulli(self, site, bits):
        self._rec(site, _n(bits), bits.numel())

    def attention(self, site, q, k, v, a, f, allowed):
        B, h = q.shape[:2]
        base = site.rsplit(".", 1)[0]
        self._rec(f"{base}.attn", _n(a), B * h * int(allowed.sum()))
        self._rec(f"{base}.mssa", _n(f), f.numel())

    def rates(self) -> dict[str, Fraction]:
        return {k: Fraction(self.spikes[k], self.slots[k]) for k in self.slots if self.slots[k]}


def _run_with(model: ICLTransformer, observer: Observer, tokens: torch.Tensor, seed: int, batch_size: int):
    prev = model.observer
    model.observer = observer
    gen = torch.Generator().manual_seed(seed)
    try:
        with torch.no_grad():
            for i in range(0, tokens.shape[0], batch_size):
                chunk = tokens[i:i + batch_size]
                if isinstance(observer, OpCounter):
                    observer.read_weights(model, chunk.shape[1], chunk.shape[0])
                model(chunk, gen)
    finally:
        model.observer = prev


def _as_tokens(tokens) -> torch.Tensor:
    t = torch.as_tensor(tokens, dtype=torch.float32)
    return t[None] if t.ndim == 2 else t


def measure_sparsity(model: ICLTransformer, tokens, seed: int = 0, batch_size: int = 256) -> dict[str, Fraction]:
    """Exact per-site firing rates of a spiking model over ``(B, M, d_t)`` tokens."""
    rec = RateRecorder()
    _run_with(model, rec, _as_tokens(tokens), seed, batch_size)
    return rec.rates()


def instrumented_counts(model: ICLTransformer, tokens, seed: int = 0, batch_size: int = 256) -> OpCounts:
    """Per-inference counts tallied from a real forward pass."""
    counter = OpCounter()
    _run_with(model, counter, _as_tokens(tokens), seed, batch_size)
    return counter.per_inference()


# --------------------------------------------------------------------------
# Reports


ENERGY_CSV_COLUMNS = ["variant", "L", "d_e", "compute_pj", "memory_pj", "total_pj", "ber"]


@dataclass
class EnergyReport:
    n_layers: int
    d_e: int
    ann: EnergyBreakdown
    snn: EnergyBreakdown
    ann_counts: OpCounts
    snn_counts: OpCounts
    ber_ann: float = float("nan")
    ber_snn: float = float("nan")

    @property
    def compute_ratio(self) -> float:
        return self.ann.compute_pj / self.snn.compute_pj

    @property
    def memory_ratio(self) -> float:
        return self.ann.memory_pj / self.snn.memory_pj

    def rows(self) -> list[dict]:
        out = []
        for variant, e, ber in (("ann", self.ann, self.ber_ann), ("snn", self.snn, self.ber_snn)):
            out.append({"variant": variant, "L": self.n_layers, "d_e": self.d_e, "compute_pj": e.compute_pj,
                        "memory_pj": e.memory_pj, "total_pj": e.total_pj, "ber": ber})
        return out


def energy_report(config: ModelConfig, M: int, rates: Mapping[str, Number],
                  constants: EnergyConstants | None = None, ber_ann: float = float("nan"),
                  ber_snn: float = float("nan")) -> EnergyReport:
    """Energy of matched dense and spiking models of the given size."""
    k = constants or EnergyConstants()
    ann_cfg = ModelConfig.from_dict({**config.to_dict(), "variant": "ann"})
    snn_cfg = ModelConfig.from_dict({**config.to_dict(), "variant": "snn"})
    ann = count_ops_ann(ann_cfg, M)
    snn = count_ops_snn(snn_cfg, M, rates)
    return EnergyReport(config.n_layers, config.d_e, energy_of(ann, k), energy_of(snn, k), ann, snn,
                        ber_ann, ber_snn)


def write_energy_csv(path: str | Path, reports: Iterable[EnergyReport]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ENERGY_CSV_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerows(r.rows())


def write_constants_csv(path: str | Path, constants: EnergyConstants) -> None:
    """Provenance block: every constant with its value and source."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["op", "energy_pj", "unit", "source"])
        for name, value in constants.as_dict().items():
            unit = "per byte" if name.startswith("sram") else "per op"
            w.writerow([name, value, unit, constants.provenance.get(name, "")])
