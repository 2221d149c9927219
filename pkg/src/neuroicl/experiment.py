"""End-to-end pipelines shared by the command line and the acceptance tests."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
import torch

from .channel import ChannelConfig
from .config import ExperimentConfig
from .energy import EnergyConstants, EnergyReport, energy_report, measure_sparsity
from .trainer import (
    BerResult,
    PretrainDataset,
    TrainResult,
    build_pretrain_dataset,
    evaluate_ber,
    evaluate_mmse_ber,
    pretrain,
    sample_eval_set,
)
from .transformer import ICLTransformer, ModelConfig, build_model, tokens_from_batch

log = logging.getLogger(__name__)

__all__ = ["Seeds", "train_model", "eval_set_for", "evaluate_model", "evaluate_mmse", "size_config",
           "energy_table", "TrainedModel"]


@dataclass(frozen=True)
class Seeds:
    """Independent integer seeds for each random stage, derived from one master seed."""

    data: int
    model: int
    train: int
    eval: int

    @classmethod
    def from_master(cls, seed: int) -> "Seeds":
        s = np.random.SeedSequence(seed).generate_state(4)
        return cls(*(int(x) for x in s))


@dataclass
class TrainedModel:
    model: ICLTransformer
    result: TrainResult
    n_train_tasks: int


def train_model(cfg: ExperimentConfig, n_train_tasks: int | None = None, variant: str | None = None,
                progress=None) -> TrainedModel:
    seeds = Seeds.from_master(cfg.seed)
    n = cfg.data.n_train_tasks if n_train_tasks is None else n_train_tasks
    mcfg = cfg.model if variant is None else dataclasses.replace(cfg.model, variant=variant)
    data = build_pretrain_dataset(n, cfg.train.n_example, cfg.channel, np.random.default_rng(seeds.data))
    model = build_model(mcfg, seed=seeds.model)
    tcfg = dataclasses.replace(cfg.train, seed=seeds.train)
    result = pretrain(model, data, tcfg, cfg.channel, progress=progress)
    return TrainedModel(model, result, n)


def eval_set_for(cfg: ExperimentConfig, snr_db: float, offset: int = 0) -> PretrainDataset:
    seeds = Seeds.from_master(cfg.seed)
    rng = np.random.default_rng([seeds.eval, offset, int(round(snr_db * 1000)) & 0xFFFFFFFF])
    return sample_eval_set(cfg.data.eval_tasks, cfg.data.eval_queries, cfg.channel, snr_db, rng)


def evaluate_model(cfg: ExperimentConfig, model: ICLTransformer, snr_db: float) -> BerResult:
    ev = eval_set_for(cfg, snr_db)
    return evaluate_ber(model, cfg.channel, 0, 0, snr_db, None, eval_set=ev, seed=Seeds.from_master(cfg.seed).eval)


def evaluate_mmse(cfg: ExperimentConfig, snr_db: float, n_tasks: int | None = None) -> BerResult:
    seeds = Seeds.from_master(cfg.seed)
    rng = np.random.default_rng([seeds.eval, 7, int(round(snr_db * 1000)) & 0xFFFFFFFF])
    return evaluate_mmse_ber(cfg.channel, n_tasks or cfg.data.eval_tasks, cfg.data.eval_queries, snr_db, rng)


def size_config(base: ModelConfig, n_layers: int, d_e: int) -> ModelConfig:
    """``base`` resized; the hidden width follows ``d_e`` unless it was non-default."""
    d = base.to_dict()
    d_h = None if base.d_h == 4 * base.d_e else base.d_h
    d.update(n_layers=n_layers, d_e=d_e, d_h=d_h)
    return ModelConfig.from_dict(d)


def _rate_tokens(cfg: ExperimentConfig, channel: ChannelConfig, d_t: int) -> np.ndarray:
    ev = eval_set_for(cfg, cfg.data.eval_snr_db, offset=1)
    tok = tokens_from_batch(ev.contexts, channel.quantizer, channel.constellation_obj, d_t)
    return tok[: cfg.energy.n_contexts]


def energy_table(cfg: ExperimentConfig, snn: ICLTransformer, constants: EnergyConstants | None = None,
                 ber_snn: float = float("nan"), ber_ann: float = float("nan"),
                 models: dict | None = None) -> list[tuple[EnergyReport, str]]:
    """Energy reports for every configured size.

    Firing rates come from ``snn`` when its size matches, from ``models`` when a
    model of that size is supplied, and otherwise from a freshly initialized
    spiking model of that size.  Returns ``(report, rate_source)`` pairs.
    """
    constants = constants or cfg.energy.energy_constants
    models = models or {}
    seeds = Seeds.from_master(cfg.seed)
    tokens = _rate_tokens(cfg, cfg.channel, snn.config.d_t)
    M = tokens.shape[1]
    out = []
    for L, d_e in cfg.energy.sizes:
        if (snn.config.n_layers, snn.config.d_e) == (L, d_e):
            model, source, bs, ba = snn, "checkpoint", ber_snn, ber_ann
        elif (L, d_e) in models:
            model, source, bs, ba = models[(L, d_e)], "supplied", float("nan"), float("nan")
        else:
            model = build_model(size_config(snn.config, L, d_e), seed=seeds.model)
            source, bs, ba = "initialized", float("nan"), float("nan")
        rates = measure_sparsity(model, tokens, seed=seeds.eval)
        rep = energy_report(model.config, M, rates, constants, ber_ann=ba, ber_snn=bs)
        log.info("energy L=%d d_e=%d compute x%.2f memory x%.2f (%s rates)", L, d_e, rep.compute_ratio,
                 rep.memory_ratio, source)
        out.append((rep, source))
    return out
