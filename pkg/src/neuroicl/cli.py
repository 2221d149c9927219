"""Command-line experiment driver.

Every command reads a TOML config, writes into a fresh numbered run
directory under the output root, and leaves a ``.meta.json`` sidecar next to
each CSV.  Exit codes: 0 success, 1 user error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .channel import ConfigurationError, context_csv_header, context_to_array, generate_contexts, sample_task
from .checkpoint import CheckpointError, content_hash, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .energy import write_constants_csv, write_energy_csv
from .experiment import Seeds, energy_table, evaluate_mmse, evaluate_model, train_model
from .trainer import TrainingDiverged

log = logging.getLogger("neuroicl")

EXIT_OK, EXIT_USER, EXIT_RUNTIME = 0, 1, 2


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# Output plumbing


def new_run_dir(root: str | Path, command: str) -> Path:
    """``root/<command>-NNN`` with the next free number; never reuses a directory."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    n = 1
    while True:
        d = root / f"{command}-{n:03d}"
        try:
            d.mkdir()
            return d
        except FileExistsError:
            n += 1


def write_csv(path: Path, header: list[str], rows: list[list], cfg: ExperimentConfig, extra: dict | None = None) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    write_meta(path, cfg, extra)
    return path


def write_meta(path: Path, cfg: ExperimentConfig, extra: dict | None = None) -> None:
    meta = {
        "file": path.name,
        "config_hash": cfg.config_hash(),
        "code_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "seed": cfg.seed,
        "content_hash": content_hash(path),
        **(extra or {}),
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.6g}"


# --------------------------------------------------------------------------
# Commands


def cmd_train(cfg: ExperimentConfig, args) -> Path:
    out = new_run_dir(args.out or cfg.output_dir, "train")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    trained = train_model(cfg)
    ckpt = save_checkpoint(out / "model.ckpt", trained.model,
                           {"config_hash": cfg.config_hash(), "n_train_tasks": trained.n_train_tasks,
                            "seed": cfg.seed, "final_loss": trained.result.final_loss})
    (out / "model.ckpt.meta.json").write_text(json.dumps(
        {"config_hash": cfg.config_hash(), "content_hash": content_hash(ckpt), "code_version": __version__}, indent=2))
    rows = [[i + 1, repr(l)] for i, l in enumerate(trained.result.losses)]
    write_csv(out / "loss.csv", ["step", "loss"], rows, cfg, {"checkpoint_hash": content_hash(ckpt)})
    print(f"final loss {trained.result.final_loss:.6f}")
    print(ckpt)
    return out


def _sweep_point(payload):
    cfg_dict, n, variant = payload
    cfg = ExperimentConfig.from_dict(cfg_dict)
    trained = train_model(cfg, n_train_tasks=n, variant=variant)
    return n, variant, evaluate_model(cfg, trained.model, cfg.data.eval_snr_db)


def cmd_sweep_tasks(cfg: ExperimentConfig, args) -> Path:
    out = new_run_dir(args.out or cfg.output_dir, "sweep")
    grid = cfg.sweep.grid
    jobs = [(cfg.to_dict(), n, v) for n in grid for v in cfg.sweep.variants]
    results = {}
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            for n, v, r in pool.map(_sweep_point, jobs):
                results[n, v] = r
    else:
        for job in jobs:
            n, v, r = _sweep_point(job)
            log.info("n_tasks=%d %s ber=%.4f", n, v, r.ber)
            results[n, v] = r
    mmse = evaluate_mmse(cfg, cfg.data.eval_snr_db)
    nan = float("nan")
    rows = []
    for n in grid:
        rows.append([n] + [_fmt(results[n, v].ber if (n, v) in results else nan) for v in ("snn", "ann")]
                    + [_fmt(mmse.ber)])
    write_csv(out / "sweep.csv", ["n_tasks", "ber_snn", "ber_ann", "ber_mmse"], rows, cfg,
              {"snr_db": cfg.data.eval_snr_db})
    long_rows = [[v, cfg.data.eval_snr_db, n, _fmt(r.ber), _fmt(r.ci_low), _fmt(r.ci_high)]
                 for (n, v), r in sorted(results.items())]
    write_csv(out / "sweep_ci.csv", ["detector", "snr_db", "n_train_tasks", "ber", "ci_low", "ci_high"],
              long_rows, cfg)
    print(out / "sweep.csv")
    return out


def _load_model(path):
    if path is None:
        raise UserError("--checkpoint is required for this command")
    try:
        ck = load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from exc
    return ck, ck.build()


def cmd_eval(cfg: ExperimentConfig, args) -> Path:
    detectors = args.detector or []
    ck = model = None
    if args.checkpoint is not None or any(d != "mmse" for d in detectors) or not detectors:
        ck, model = _load_model(args.checkpoint)
        if not detectors:
            detectors = [ck.config.variant]
        for d in detectors:
            if d != "mmse" and d != ck.config.variant:
                raise UserError(f"checkpoint holds a {ck.config.variant} model, not {d}")
    if model is not None:
        cfg = dataclasses.replace(cfg, model=ck.config)
    snrs = args.snr if args.snr else cfg.data.eval_snrs
    out = new_run_dir(args.out or cfg.output_dir, "eval")
    n_train = ck.metadata.get("n_train_tasks", "") if ck else ""
    rows = []
    for d in detectors:
        for snr in snrs:
            r = evaluate_mmse(cfg, snr) if d == "mmse" else evaluate_model(cfg, model, snr)
            rows.append([d, snr, n_train if d != "mmse" else "", _fmt(r.ber), _fmt(r.ci_low), _fmt(r.ci_high)])
            log.info("%s snr=%g ber=%.4f", d, snr, r.ber)
    extra = {"checkpoint_hash": content_hash(args.checkpoint)} if args.checkpoint else {}
    write_csv(out / "ber.csv", ["detector", "snr_db", "n_train_tasks", "ber", "ci_low", "ci_high"], rows, cfg, extra)
    print(out / "ber.csv")
    return out


def cmd_energy(cfg: ExperimentConfig, args) -> Path:
    ck, model = _load_model(args.checkpoint)
    if ck.config.variant != "snn":
        raise UserError("energy accounting needs a spiking checkpoint for firing rates")
    cfg = dataclasses.replace(cfg, model=ck.config)
    ber_snn = evaluate_model(cfg, model, cfg.data.eval_snr_db).ber
    ber_ann = float("nan")
    if args.ann_checkpoint:
        ack, ann = _load_model(args.ann_checkpoint)
        ber_ann = evaluate_model(dataclasses.replace(cfg, model=ack.config), ann, cfg.data.eval_snr_db).ber
    out = new_run_dir(args.out or cfg.output_dir, "energy")
    constants = cfg.energy.energy_constants
    table = energy_table(cfg, model, constants, ber_snn=ber_snn, ber_ann=ber_ann)
    reports = [r for r, _ in table]
    write_energy_csv(out / "energy.csv", reports)
    write_meta(out / "energy.csv", cfg, {"checkpoint_hash": content_hash(args.checkpoint)})
    ratio_rows = [[r.n_layers, r.d_e, _fmt(r.compute_ratio), _fmt(r.memory_ratio),
                   _fmt(r.ann.total_pj / r.snn.total_pj), src] for r, src in table]
    write_csv(out / "energy_ratios.csv", ["L", "d_e", "compute_ratio", "memory_ratio", "total_ratio", "rate_source"],
              ratio_rows, cfg)
    write_constants_csv(out / "energy_constants.csv", constants)
    write_meta(out / "energy_constants.csv", cfg)
    for row in ratio_rows:
        print("L={} d_e={} compute x{} memory x{} total x{} ({})".format(*row))
    print(out / "energy.csv")
    return out


def cmd_gen_data(cfg: ExperimentConfig, args) -> Path:
    out = new_run_dir(args.out or cfg.output_dir, "data")
    n_tasks = args.n_tasks or cfg.data.n_train_tasks
    rng = np.random.default_rng(Seeds.from_master(cfg.seed).data)
    ch = cfg.channel
    header = ["task_id", "snr_db", "sigma2"] + context_csv_header(ch.n_pilots, ch.n_t, ch.n_r)
    path = out / "contexts.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(n_tasks):
            task = sample_task(rng, ch.snr_db_range, ch.n_t, ch.n_r)
            batch = generate_contexts(task, ch.n_pilots, cfg.train.n_example, rng, ch.quantizer,
                                      ch.constellation_obj, task_id=i)
            for j in range(len(batch)):
                arr = context_to_array(batch.context(j, ch.constellation_obj))
                w.writerow([i, repr(task.snr_db), repr(task.sigma2)] + [repr(float(x)) for x in arr])
    write_meta(path, cfg, {"n_tasks": n_tasks, "contexts_per_task": cfg.train.n_example})
    print(path)
    return out


COMMANDS = {"train": cmd_train, "sweep-tasks": cmd_sweep_tasks, "eval": cmd_eval, "energy": cmd_energy,
            "gen-data": cmd_gen_data}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neuroicl", description="Spiking in-context MIMO detection experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="TOML experiment config")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out", help="output root (default: config output_dir)")
        s.add_argument("--checkpoint", help="model checkpoint file")
        s.add_argument("--detector", action="append", choices=["snn", "ann", "mmse"],
                       help="detector to evaluate; repeatable")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "sweep-tasks":
            s.add_argument("--jobs", type=int, default=1, help="worker processes for grid points")
        if name == "eval":
            s.add_argument("--snr", type=float, action="append", help="SNR in dB; repeatable")
        if name == "energy":
            s.add_argument("--ann-checkpoint", help="dense checkpoint for the BER column")
        if name == "gen-data":
            s.add_argument("--n-tasks", type=int, help="number of tasks (default: data.n_train_tasks)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_seed(args.seed)
        COMMANDS[args.command](cfg, args)
    except (ConfigurationError, UserError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - report any runtime failure with the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
