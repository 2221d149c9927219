"""Pre-training datasets, cross-entropy training and BER evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import binomtest

from .channel import ChannelConfig, ContextBatch, Task, generate_contexts, quantize, sample_task, snr_to_sigma2
from .labels import (
    bit_errors,
    class_index,
    class_index_from_indices,
    indices_from_class,
    symbols_from_class,
)
from .mmse import hard_decide, mmse_equalize_batch
from .transformer import ICLTransformer, SpikingICLTransformer, predict_classes, tokens_from_batch

__all__ = [
    "class_index",
    "class_index_from_indices",
    "indices_from_class",
    "symbols_from_class",
    "cross_entropy_loss",
    "cross_entropy_grad",
    "PretrainDataset",
    "TrainConfig",
    "TrainResult",
    "BerResult",
    "build_pretrain_dataset",
    "sample_eval_set",
    "pretrain",
    "evaluate_ber",
    "evaluate_mmse_ber",
    "wilson_interval",
]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    shift = scores - scores.max(axis=-1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))


def cross_entropy_loss(scores: np.ndarray, label) -> float:
    """``-log softmax(scores)[label]``; for a 2-D batch of scores, the mean over rows."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    lp = _log_softmax(scores)
    if scores.ndim == 1:
        return float(-lp[int(label)])
    label = np.asarray(label)
    return float(-lp[np.arange(len(label)), label].mean())


def cross_entropy_grad(scores: np.ndarray, label: int) -> np.ndarray:
    """Gradient of ``cross_entropy_loss`` for one score vector: ``softmax - onehot``."""
    p = np.exp(_log_softmax(scores))
    p[int(label)] -= 1.0
    return p


def one_hot_cross_entropy(scores: np.ndarray, label: int) -> float:
    """Summed one-hot form ``-sum_c f(s)[c] log p[c]``."""
    onehot = np.zeros(np.shape(scores)[-1])
    onehot[label] = 1.0
    return float(-(onehot * _log_softmax(scores)).sum())


@dataclass
class PretrainDataset:
    tasks: list[Task]
    contexts: ContextBatch
    n_example: int
    K: int

    def __len__(self) -> int:
        return len(self.contexts)

    @property
    def labels(self) -> np.ndarray:
        return class_index_from_indices(self.contexts.labels_idx, self.K)

    def position_labels(self) -> np.ndarray:
        """Labels for every y-token position: pilot symbols and the query, ``(B, N+1)``."""
        return class_index_from_indices(self.contexts.s_idx, self.K)


def build_pretrain_dataset(n_train: int, n_example: int, channel: ChannelConfig, rng: np.random.Generator,
                           n_pilots: int | None = None, snr_db: float | None = None) -> PretrainDataset:
    """``n_train`` i.i.d. tasks, each with ``n_example`` i.i.d. contexts."""
    if n_train < 1 or n_example < 1:
        raise ValueError("dataset sizes must be >= 1")
    n_pilots = channel.n_pilots if n_pilots is None else n_pilots
    const = channel.constellation_obj
    q = channel.quantizer
    tasks, batches = [], []
    for i in range(n_train):
        task = sample_task(rng, channel.snr_db_range, channel.n_t, channel.n_r, snr_db=snr_db)
        tasks.append(task)
        batches.append(generate_contexts(task, n_pilots, n_example, rng, q, const, task_id=i))
    return PretrainDataset(tasks, ContextBatch.concat(batches), n_example, const.K)


def sample_eval_set(n_tasks: int, n_queries: int, channel: ChannelConfig, snr_db: float, rng: np.random.Generator,
                    n_pilots: int | None = None) -> PretrainDataset:
    """Fresh tasks at a fixed SNR for evaluation."""
    return build_pretrain_dataset(n_tasks, n_queries, channel, rng, n_pilots=n_pilots, snr_db=snr_db)


@dataclass
class TrainConfig:
    steps: int = 4000
    batch_size: int = 64
    lr: float = 1e-3
    min_lr_ratio: float = 0.05
    warmup_steps: int = 100
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    n_example: int = 16
    loss_positions: str = "final"
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.n_example < 1:
            raise ValueError("training sizes and rates must be positive")
        if self.loss_positions not in ("final", "all"):
            raise ValueError("loss_positions must be 'final' or 'all'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def _lr_factor(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup_steps:
        return (step + 1) / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * progress))


def pretrain(model: ICLTransformer, dataset: PretrainDataset, cfg: TrainConfig, channel: ChannelConfig,
             progress=None) -> TrainResult:
    """Minimize the cross-entropy of the detector output with Adam and cosine decay.

    Mini-batches are drawn uniformly with replacement from the dataset.  With
    ``loss_positions='all'`` every y-token position is supervised with its own
    symbol, not just the query.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    tokens = torch.as_tensor(
        tokens_from_batch(dataset.contexts, channel.quantizer, channel.constellation_obj, model.config.d_t),
        dtype=torch.float32,
    )
    if cfg.loss_positions == "all":
        labels = torch.as_tensor(dataset.position_labels())
    else:
        labels = torch.as_tensor(dataset.labels)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: _lr_factor(s, cfg))
    result = TrainResult()
    model.train()
    for step in range(cfg.steps):
        rows = torch.as_tensor(rng.integers(0, len(dataset), cfg.batch_size))
        scores = model(tokens[rows], gen)
        if cfg.loss_positions == "all":
            s = scores[:, 0::2]
            loss = F.cross_entropy(s.reshape(-1, s.shape[-1]), labels[rows].reshape(-1))
        else:
            loss = F.cross_entropy(scores[:, -1], labels[rows])
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        sched.step()
        result.losses.append(loss.item())
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            recent = np.mean(result.losses[-cfg.log_every:])
            log.info("step %d loss %.4f", step + 1, recent)
            if progress is not None:
                progress(step + 1, recent)
    model.eval()
    return result


def wilson_interval(errors: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    if trials == 0:
        return 0.0, 1.0
    ci = binomtest(int(errors), int(trials)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass
class BerResult:
    ber: float
    ci_low: float
    ci_high: float
    errors: int
    bits: int

    def as_row(self) -> dict:
        return asdict(self)


def _ber_from_predictions(pred_class: np.ndarray, true_idx: np.ndarray, K: int) -> BerResult:
    n_t = true_idx.shape[-1]
    pred_idx = indices_from_class(pred_class, n_t, K)
    errs = int(bit_errors(pred_idx, true_idx).sum())
    n_bits = int(true_idx.size * 2)
    lo, hi = wilson_interval(errs, n_bits)
    return BerResult(errs / n_bits if n_bits else float("nan"), lo, hi, errs, n_bits)


def evaluate_ber(model: ICLTransformer, channel: ChannelConfig, n_tasks: int, n_queries_per_task: int,
                 snr_db: float, rng: np.random.Generator, n_pilots: int | None = None,
                 eval_set: PretrainDataset | None = None, seed: int = 0) -> BerResult:
    """BER of the model's query predictions on fresh tasks at ``snr_db``.

    Bits come from the Gray map of the per-antenna QPSK indices.  The
    interval is a 95% Wilson score interval over bits.
    """
    if eval_set is None:
        eval_set = sample_eval_set(n_tasks, n_queries_per_task, channel, snr_db, rng, n_pilots)
    tokens = tokens_from_batch(eval_set.contexts, channel.quantizer, channel.constellation_obj, model.config.d_t)
    gen = torch.Generator().manual_seed(seed) if isinstance(model, SpikingICLTransformer) else None
    pred = predict_classes(model, tokens, gen)
    return _ber_from_predictions(pred, eval_set.contexts.labels_idx, channel.constellation_obj.K)


def evaluate_predictor_ber(predict, eval_set: PretrainDataset, K: int) -> BerResult:
    """BER of an arbitrary ``predict(contexts) -> classes`` callable."""
    pred = np.asarray(predict(eval_set.contexts))
    return _ber_from_predictions(pred, eval_set.contexts.labels_idx, K)


def evaluate_mmse_ber(channel: ChannelConfig, n_tasks: int, n_queries_per_task: int, snr_db: float,
                      rng: np.random.Generator, quantized: bool = True, chunk: int = 20_000) -> BerResult:
    """BER of the genie MMSE detector on fresh tasks at ``snr_db``.

    The detector knows ``H`` and ``sigma2``; with ``quantized`` it equalizes
    the quantized observation.  Tasks are simulated in vectorized chunks.
    """
    const = channel.constellation_obj
    n_t, n_r = channel.n_t, channel.n_r
    sigma2 = snr_to_sigma2(snr_db, n_t)
    errs = n_bits = 0
    for start in range(0, n_tasks, chunk):
        b = min(chunk, n_tasks - start)
        H = (rng.standard_normal((b, n_r, n_t)) + 1j * rng.standard_normal((b, n_r, n_t))) / math.sqrt(2)
        idx = rng.integers(0, const.K, size=(b, n_queries_per_task, n_t))
        s = const.symbols[idx]
        noise = math.sqrt(sigma2 / 2) * (rng.standard_normal((b, n_queries_per_task, n_r))
                                         + 1j * rng.standard_normal((b, n_queries_per_task, n_r)))
        y = np.einsum("brt,bqt->bqr", H, s) + noise
        if quantized:
            y = quantize(y, channel.quantizer)
        _, pred = hard_decide(mmse_equalize_batch(H, sigma2, y), const)
        errs += int(bit_errors(pred, idx).sum())
        n_bits += idx.size * 2
    lo, hi = wilson_interval(errs, n_bits)
    return BerResult(errs / n_bits, lo, hi, errs, n_bits)
