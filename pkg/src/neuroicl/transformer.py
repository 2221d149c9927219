"""Decoder-only ICL transformers for symbol detection.

``SpikingICLTransformer`` runs T time steps per inference: tokens are
Bernoulli-encoded, embedded through a LIF layer, pass through decoder layers
built from LIF layers and masked stochastic spiking attention (MSSA), and the
linear read-out of the last layer is averaged over time.
``ANNICLTransformer`` is the dense counterpart with softmax attention and the
same weight-matrix shapes.

Both take a float tensor of tokens ``(B, M, d_t)`` with entries in [0, 1] laid
out as ``y_1, s_1, ..., y_N, s_N, y_query`` and return class scores
``(B, M, n_classes)``; the detector reads the last position.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .channel import Constellation, Context, ContextBatch, QuantizerSpec
from .snn_core import LIFNode, bernoulli_st, reset_states
from .spike_codec import normalize_received, normalize_symbols, zero_pad

MASK_MODES = ("standard", "forward")
VARIANTS = ("snn", "ann")


@dataclass
class ModelConfig:
    variant: str = "snn"
    d_e: int = 64
    n_layers: int = 2
    n_heads: int = 8
    d_h: int | None = None
    T: int = 4
    d_t: int = 4
    n_classes: int = 16
    m_max: int = 41
    mask_mode: str = "standard"
    positional: bool = True
    beta: float = 0.9
    v_thresh: float = 1.0
    surrogate_width: float = 1.0
    init_gain: float = 1.0
    qk_weight_mean: float = 0.1
    residual_bias: float = 0.0

    def __post_init__(self):
        if self.d_h is None:
            self.d_h = 4 * self.d_e
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.d_e % self.n_heads:
            raise ValueError("d_e must be divisible by n_heads")
        if min(self.d_e, self.n_heads, self.d_h, self.T, self.d_t, self.n_classes, self.m_max) < 1:
            raise ValueError("model dimensions must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")

    @property
    def d_k(self) -> int:
        return self.d_e // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


def token_width(n_t: int, n_r: int) -> int:
    """Token width that holds the real/imag split of either s or y."""
    return max(2 * n_t, 2 * n_r)


# --------------------------------------------------------------------------
# Token sequences


def build_token_sequence(context: Context, quantizer: QuantizerSpec, constellation: Constellation, d_t: int) -> np.ndarray:
    """``(2N+1, d_t)`` tokens ordered ``y_1, s_1, ..., y_N, s_N, y_query``."""
    n_r = len(context.query_y)
    ys = normalize_received(np.vstack([np.reshape(context.pilot_y, (-1, n_r)), context.query_y[None]]),
                            quantizer.l_min, quantizer.l_max)
    ss = normalize_symbols(context.pilot_s, constellation)
    return _interleave(zero_pad(ys, d_t)[None], zero_pad(ss, d_t)[None])[0]


def tokens_from_batch(batch: ContextBatch, quantizer: QuantizerSpec, constellation: Constellation, d_t: int) -> np.ndarray:
    """Vectorized ``build_token_sequence`` over a batch: ``(B, 2N+1, d_t)``."""
    ys = normalize_received(batch.y, quantizer.l_min, quantizer.l_max)
    ss = normalize_symbols(constellation.symbols[batch.s_idx[:, :-1]], constellation)
    return _interleave(zero_pad(ys, d_t), zero_pad(ss, d_t))


def _interleave(ys: np.ndarray, ss: np.ndarray) -> np.ndarray:
    B, n1, d = ys.shape
    out = np.zeros((B, 2 * n1 - 1, d))
    out[:, 0::2] = ys
    out[:, 1::2] = ss
    return out


# --------------------------------------------------------------------------
# Masking and MSSA


def apply_causal_mask(m: int, m_prime: int, mode: str = "standard") -> bool:
    """Whether token ``m`` may attend to token ``m_prime`` (1-based positions).

    ``standard`` lets a token see itself and the past; ``forward`` uses the
    literal ``m <= m'`` condition, which looks only forward.
    """
    if mode == "standard":
        return m_prime <= m
    if mode == "forward":
        return m <= m_prime
    raise ValueError(f"unknown mask mode {mode!r}")


def attention_mask(M: int, mode: str = "standard") -> np.ndarray:
    """``(M, M)`` boolean matrix, ``[m, m']`` true when attention is allowed."""
    idx = np.arange(M)
    if mode == "standard":
        return idx[None, :] <= idx[:, None]
    if mode == "forward":
        return idx[:, None] <= idx[None, :]
    raise ValueError(f"unknown mask mode {mode!r}")


def mssa_forward(Q, K, V, rng: np.random.Generator | None = None, mask_mode: str = "standard",
                 counters: dict | None = None, uniforms: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """One time step of masked stochastic spiking attention on ``(d_k, M)`` bits.

    Only ANDs and counts touch the data: the attention bit ``A[m, m']`` is
    drawn with probability ``popcount(Q[:, m] & K[:, m']) / d_k`` on allowed
    pairs (zero elsewhere), and the output bit ``F[d, m]`` with probability
    ``popcount(A[m, :] & V[d, :]) / M``.  ``uniforms`` substitutes the random
    numbers (shapes ``(M, M)`` and ``(d_k, M)``) for reproducible comparisons.
    """
    Q = np.asarray(Q, dtype=np.bool_)
    K = np.asarray(K, dtype=np.bool_)
    V = np.asarray(V, dtype=np.bool_)
    d_k, M = Q.shape
    allowed = attention_mask(M, mask_mode)
    a_count = (Q[:, :, None] & K[:, None, :]).sum(axis=0)
    a_count[~allowed] = 0
    if uniforms is None:
        uA = rng.random((M, M))
        uF = rng.random((d_k, M))
    else:
        uA, uF = uniforms
    A = (uA < a_count / d_k) & allowed
    f_count = (A[None, :, :] & V[:, None, :]).sum(axis=-1)
    F = uF < f_count / M
    if counters is not None:
        n_pairs = int(allowed.sum())
        counters["and_gate"] = counters.get("and_gate", 0) + 2 * n_pairs * d_k
        counters["counter_inc"] = counters.get("counter_inc", 0) + 2 * n_pairs * d_k
        counters["rng_bernoulli"] = counters.get("rng_bernoulli", 0) + n_pairs + d_k * M
    return F


def mssa_expectation(Q, K, V, mask_mode: str = "standard") -> np.ndarray:
    """Exact ``E[F]`` for fixed bits: ``(1/(M d_k)) sum_{m' allowed} popcount(Q_m & K_m') V[d, m']``."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    d_k, M = Q.shape
    p_a = (Q.T @ K) / d_k * attention_mask(M, mask_mode)
    return (V @ p_a.T) / M


def mssa_torch(q, k, v, allowed: torch.Tensor, n_heads: int, generator=None, uniforms=None, observer=None, site=""):
    """Batched MSSA: ``q, k, v`` are ``(B, M, d_e)`` bits split into heads along features.

    On binary inputs the matmuls below equal AND-then-popcount.  Returns
    ``(B, M, d_e)`` with heads stacked along the feature axis.
    """
    B, M, d_e = q.shape
    d_k = d_e // n_heads
    qh = q.view(B, M, n_heads, d_k).transpose(1, 2)
    kh = k.view(B, M, n_heads, d_k).transpose(1, 2)
    vh = v.view(B, M, n_heads, d_k).transpose(1, 2)
    mask = allowed.to(q.dtype)
    p_a = (qh @ kh.transpose(-1, -2)) / d_k * mask
    uA, uF = (None, None) if uniforms is None else uniforms
    a = bernoulli_st(p_a, generator, uA) * mask
    p_f = (a @ vh) / M
    f = bernoulli_st(p_f, generator, uF)
    out = f.transpose(1, 2).reshape(B, M, d_e)
    if observer is not None:
        observer.attention(site, qh, kh, vh, a, f, allowed)
    return out


# --------------------------------------------------------------------------
# Observers


class Observer:
    """Hook interface; models call these at every arithmetic site. No-ops here.

    Spiking sites report tensors so counts can be taken from what actually
    fired.  Dense sites report multiply-accumulate and output counts computed
    from the runtime operand shapes.
    """

    def synapse(self, site: str, x: torch.Tensor, fan_out: int) -> None: ...

    def neurons(self, site: str, s: torch.Tensor) -> None: ...

    def affine(self, site: str, x: torch.Tensor) -> None: ...

    def bernoulli(self, site: str, bits: torch.Tensor) -> None: ...

    def attention(self, site: str, q, k, v, a, f, allowed) -> None: ...

    def add(self, site: str, x: torch.Tensor) -> None: ...

    def accumulate(self, site: str, n_values: int) -> None: ...

    def mac(self, site: str, n_mac: int, n_out: int) -> None: ...

    def write(self, site: str, n_values: int) -> None: ...


# --------------------------------------------------------------------------
# Models


def _normal(shape, std, generator=None):
    return nn.Parameter(torch.randn(shape, generator=generator) * std)


class ChannelAffine(nn.Module):
    """Per-channel learned scale and bias applied to a residual current."""

    def __init__(self, d: int, scale: float = 1.0, bias: float = 0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.full((d,), float(scale)))
        self.bias = nn.Parameter(torch.full((d,), float(bias)))

    def forward(self, x):
        return x * self.weight + self.bias


class ICLTransformer(nn.Module):
    """Shared parameter layout for both variants."""

    def __init__(self, config: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        c = config
        self.W_e = _normal((c.d_e, c.d_t), 1.0 / math.sqrt(c.d_t), generator)
        self.pos = nn.Parameter(torch.zeros(c.m_max, c.d_e)) if c.positional else None
        if self.pos is not None:
            nn.init.normal_(self.pos, std=0.1, generator=generator)
        self.layers = nn.ModuleList(self._make_layer(generator) for _ in range(c.n_layers))
        self.W_O = _normal((c.n_classes, c.d_e), 1.0 / math.sqrt(c.d_e), generator)
        self.observer: Observer | None = None

    def _make_layer(self, generator):
        raise NotImplementedError

    def matrix_shapes(self) -> dict[str, tuple[int, ...]]:
        """Shapes of all trainable matrices (normalization parameters excluded)."""
        return {n: tuple(p.shape) for n, p in self.named_parameters() if ".norm" not in n}

    def _allowed(self, M: int, device) -> torch.Tensor:
        return torch.as_tensor(attention_mask(M, self.config.mask_mode), device=device)

    def _embed_current(self, x):
        cur = x @ self.W_e.T
        if self.pos is not None:
            M = x.shape[1]
            if M > self.config.m_max:
                raise ValueError(f"sequence of {M} tokens exceeds m_max={self.config.m_max}")
            cur = cur + self.pos[:M]
        return cur


class SpikingDecoderLayer(nn.Module):
    def __init__(self, c: ModelConfig, generator=None):
        super().__init__()
        g = c.init_gain
        # Inputs are sparse spikes; scale so the summed current has O(gain) spread
        # at a nominal 25% input rate.
        sd = lambda n: g / math.sqrt(0.25 * n)
        # MSSA divides by the full sequence length, so attention only carries
        # signal when Q and K fire densely; a positive weight mean starts them there.
        self.W_Q = nn.Parameter(_normal((c.d_e, c.d_e), sd(c.d_e), generator) + c.qk_weight_mean)
        self.W_K = nn.Parameter(_normal((c.d_e, c.d_e), sd(c.d_e), generator) + c.qk_weight_mean)
        self.W_V = _normal((c.d_e, c.d_e), sd(c.d_e), generator)
        self.W_1 = _normal((c.d_h, c.d_e), sd(c.d_e), generator)
        self.W_2 = _normal((c.d_e, c.d_h), sd(c.d_h), generator)
        # unit gain keeps firing from dying out with depth
        self.norm1 = ChannelAffine(c.d_e, 1.0, c.residual_bias)
        self.norm2 = ChannelAffine(c.d_e, 1.0, c.residual_bias)
        lif = lambda: LIFNode(c.beta, c.v_thresh, c.surrogate_width)
        self.lif_q, self.lif_k, self.lif_v = lif(), lif(), lif()
        self.lif_norm1, self.lif_hidden, self.lif_norm2 = lif(), lif(), lif()
        self.n_heads = c.n_heads

    def forward(self, e, allowed, generator=None, observer: Observer | None = None, site: str = "layer"):
        obs = observer
        if obs is not None:
            for name in ("q", "k", "v"):
                obs.synapse(f"{site}.{name}", e, self.W_Q.shape[0])
        q = self.lif_q(e @ self.W_Q.T)
        k = self.lif_k(e @ self.W_K.T)
        v = self.lif_v(e @ self.W_V.T)
        g = mssa_torch(q, k, v, allowed, self.n_heads, generator, observer=obs, site=f"{site}.attn")
        h = self.lif_norm1(self.norm1(g + e))
        if obs is not None:
            obs.neurons(f"{site}.q", q)
            obs.neurons(f"{site}.k", k)
            obs.neurons(f"{site}.v", v)
            obs.affine(f"{site}.norm1", g)
            obs.neurons(f"{site}.norm1", h)
            obs.synapse(f"{site}.ffn1", h, self.W_1.shape[0])
        z = self.lif_hidden(h @ self.W_1.T)
        if obs is not None:
            obs.neurons(f"{site}.ffn1", z)
            obs.synapse(f"{site}.ffn2", z, self.W_2.shape[0])
        out = self.lif_norm2(self.norm2(z @ self.W_2.T + h))
        if obs is not None:
            obs.affine(f"{site}.norm2", out)
            obs.neurons(f"{site}.norm2", out)
        return out, (q, k, v, g, h, z)


class SpikingICLTransformer(ICLTransformer):
    def __init__(self, config: ModelConfig, generator: torch.Generator | None = None):
        if config.variant != "snn":
            raise ValueError("SpikingICLTransformer needs variant='snn'")
        super().__init__(config, generator)
        c = config
        # Bernoulli-encoded tokens fire about half the time.
        with torch.no_grad():
            self.W_e.mul_(c.init_gain * 2.0)
        self.lif_embed = LIFNode(c.beta, c.v_thresh, c.surrogate_width)
        self.trace: list | None = None

    def _make_layer(self, generator):
        return SpikingDecoderLayer(self.config, generator)

    def forward(self, tokens: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        c = self.config
        reset_states(self)
        obs = self.observer
        allowed = self._allowed(tokens.shape[1], tokens.device)
        out = 0.0
        for t in range(c.T):
            bits = bernoulli_st(tokens, generator)
            if obs is not None:
                obs.bernoulli("embed.in", bits)
                obs.synapse("embed", bits, c.d_e)
            cur = self._embed_current(bits)
            if obs is not None and self.pos is not None:
                obs.add("embed.pos", cur)
            e = self.lif_embed(cur)
            if obs is not None:
                obs.neurons("embed", e)
            step = [e]
            for l, layer in enumerate(self.layers):
                e, internals = layer(e, allowed, generator, obs, site=f"layer{l}")
                step.append(internals)
                step.append(e)
            if obs is not None:
                obs.synapse("out", e, c.n_classes)
                obs.accumulate("out", e.shape[0] * e.shape[1] * c.n_classes)
            if self.trace is not None:
                self.trace.append(step)
            out = out + e @ self.W_O.T
        return out / c.T


class ANNDecoderLayer(nn.Module):
    def __init__(self, c: ModelConfig, generator=None):
        super().__init__()
        sd = lambda n: 1.0 / math.sqrt(n)
        self.W_Q = _normal((c.d_e, c.d_e), sd(c.d_e), generator)
        self.W_K = _normal((c.d_e, c.d_e), sd(c.d_e), generator)
        self.W_V = _normal((c.d_e, c.d_e), sd(c.d_e), generator)
        self.W_1 = _normal((c.d_h, c.d_e), math.sqrt(2.0) * sd(c.d_e), generator)
        self.W_2 = _normal((c.d_e, c.d_h), sd(c.d_h), generator)
        self.norm1 = nn.LayerNorm(c.d_e)
        self.norm2 = nn.LayerNorm(c.d_e)
        self.n_heads = c.n_heads
        self.last_attention: torch.Tensor | None = None

    def forward(self, x, allowed, observer: Observer | None = None, site: str = "layer"):
        B, M, d_e = x.shape
        h, d_k = self.n_heads, d_e // self.n_heads
        q = (x @ self.W_Q.T).view(B, M, h, d_k).transpose(1, 2)
        k = (x @ self.W_K.T).view(B, M, h, d_k).transpose(1, 2)
        v = (x @ self.W_V.T).view(B, M, h, d_k).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(d_k)
        scores = scores.masked_fill(~allowed, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        self.last_attention = attn
        a = (attn @ v).transpose(1, 2).reshape(B, M, d_e)
        x = self.norm1(x + a)
        z = torch.relu(x @ self.W_1.T)
        out = self.norm2(x + z @ self.W_2.T)
        if observer is not None:
            n_pairs = B * h * int(allowed.sum())
            for name in ("q", "k", "v"):
                observer.mac(f"{site}.{name}", B * M * d_e * d_e, B * M * d_e)
            observer.mac(f"{site}.scores", n_pairs * d_k, n_pairs)
            observer.mac(f"{site}.apply", n_pairs * d_k, a.numel())
            observer.write(f"{site}.norm1", x.numel())
            observer.mac(f"{site}.ffn1", x.numel() * self.W_1.shape[0], z.numel())
            observer.mac(f"{site}.ffn2", z.numel() * self.W_2.shape[0], out.numel())
            observer.write(f"{site}.norm2", out.numel())
        return out


class ANNICLTransformer(ICLTransformer):
    def __init__(self, config: ModelConfig, generator: torch.Generator | None = None):
        if config.variant != "ann":
            raise ValueError("ANNICLTransformer needs variant='ann'")
        super().__init__(config, generator)

    def _make_layer(self, generator):
        return ANNDecoderLayer(self.config, generator)

    def forward(self, tokens: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        obs = self.observer
        allowed = self._allowed(tokens.shape[1], tokens.device)
        B, M, d_t = tokens.shape
        x = self._embed_current(tokens)
        if obs is not None:
            obs.mac("embed", tokens.numel() * self.config.d_e, x.numel())
            if self.pos is not None:
                obs.add("embed.pos", x)
        for l, layer in enumerate(self.layers):
            x = layer(x, allowed, obs, site=f"layer{l}")
        if obs is not None:
            obs.mac("out", x.numel() * self.config.n_classes, B * M * self.config.n_classes)
        return x @ self.W_O.T


def build_model(config: ModelConfig, seed: int | None = 0) -> ICLTransformer:
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    cls = SpikingICLTransformer if config.variant == "snn" else ANNICLTransformer
    return cls(config, gen)


def accumulate_output(step_outputs) -> tuple[torch.Tensor, int]:
    """Average per-step read-outs ``O^t`` (each ``(n_classes, M)``) and take
    the argmax of the last column; ties resolve to the lowest index."""
    O = torch.stack([torch.as_tensor(o) for o in step_outputs]).mean(dim=0)
    return O, first_argmax(O[:, -1])


def first_argmax(x) -> int:
    x = np.asarray(torch.as_tensor(x).detach().cpu().numpy())
    return int(np.flatnonzero(x == x.max())[0])


@torch.no_grad()
def predict_classes(model: ICLTransformer, tokens: np.ndarray, generator: torch.Generator | None = None,
                    batch_size: int = 256) -> np.ndarray:
    """Predicted class of the last token for every row of ``tokens``."""
    model.eval()
    preds = []
    for i in range(0, len(tokens), batch_size):
        x = torch.as_tensor(tokens[i:i + batch_size], dtype=torch.float32)
        scores = model(x, generator)[:, -1]
        # argmax picks the first maximum on ties
        preds.append(scores.argmax(dim=-1).numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def ann_forward(context: Context, model: ANNICLTransformer, quantizer: QuantizerSpec, constellation: Constellation) -> np.ndarray:
    """Class scores for the query of one context under the dense model."""
    x = build_token_sequence(context, quantizer, constellation, model.config.d_t)
    with torch.no_grad():
        return model(torch.as_tensor(x[None], dtype=torch.float32))[0, -1].numpy()


def detect(context: Context, model: ICLTransformer, quantizer: QuantizerSpec, constellation: Constellation,
           seed: int = 0) -> int:
    """Predicted joint-symbol class for the query of one context."""
    n_t = context.pilot_s.shape[1] if context.n_pilots else len(context.true_s)
    if constellation.K ** n_t != model.config.n_classes:
        raise ValueError("model class count does not match the constellation and antenna count")
    x = build_token_sequence(context, quantizer, constellation, model.config.d_t)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        scores = model(torch.as_tensor(x[None], dtype=torch.float32), gen)[0, -1]
    return first_argmax(scores)
