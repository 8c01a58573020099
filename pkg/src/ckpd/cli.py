"""Command-line surface: data generation, experiment runs, and analyzers.

Every command is a thin wrapper over library operations; outputs are CSV
and JSON files that are byte-identical across reruns with the same config
and seed.  Exit codes: 0 success, 2 usage/config error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import als, fscil, numkernel
from .covariance import ActivationCapture, compute_input_covariance, load_buffer, save_buffer
from .errors import (
    CkpdError,
    ConfigError,
    DegenerateCovariance,
    NumericalFailure,
    RegularizationFailure,
)
from .fscil import RunConfig, SessionSpec
from .kpd import KpdConfig, decompose, save_decomposed
from .net import backbone_hash, load_checkpoint, save_checkpoint

logger = logging.getLogger("ckpd")

_SPEC_KEYS = {
    "base_classes", "base_samples_per_class", "num_incremental", "ways", "shots",
    "test_samples_per_class", "seed", "input_dim", "noise_sigma",
}
_KPD_KEYS = {"rank_r", "lambda0", "inverse_threshold", "max_doublings"}
_RUN_KEYS = {
    "k_layers", "widths", "temperature", "base_epochs", "base_lr",
    "incremental_lr", "adapter_lr", "iterations", "batch_size",
}
_TOP_KEYS = _SPEC_KEYS | _KPD_KEYS | _RUN_KEYS | {"strategy", "out_dir"}


@dataclass
class ExperimentConfig:
    """Validated experiment configuration (spec + run + strategy)."""

    spec: SessionSpec = field(default_factory=SessionSpec)
    run: RunConfig = field(default_factory=RunConfig)
    strategy: str = "ckpd"
    out_dir: str | None = None


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from a JSON object, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        spec = SessionSpec(**{k: raw[k] for k in _SPEC_KEYS if k in raw})
        kpd_cfg = KpdConfig(**{k: raw[k] for k in _KPD_KEYS if k in raw})
        run_kwargs = {k: raw[k] for k in _RUN_KEYS if k in raw}
        if "widths" in run_kwargs:
            run_kwargs["widths"] = tuple(int(w) for w in run_kwargs["widths"])
        run = RunConfig(kpd=kpd_cfg, **run_kwargs)
    except (TypeError, ValueError, CkpdError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    strategy = raw.get("strategy", "ckpd")
    if strategy not in fscil.STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {fscil.STRATEGIES}")
    _validate(spec, run)
    return ExperimentConfig(spec=spec, run=run, strategy=strategy, out_dir=raw.get("out_dir"))


def _validate(spec: SessionSpec, run: RunConfig) -> None:
    if spec.ways < 1 or spec.shots < 1 or spec.base_classes < 1:
        raise ConfigError("ways, shots, and base_classes must be >= 1")
    if spec.num_incremental < 0:
        raise ConfigError("num_incremental must be >= 0")
    if run.widths[0] != spec.input_dim:
        raise ConfigError(
            f"widths[0]={run.widths[0]} must equal input_dim={spec.input_dim}"
        )
    if run.k_layers < 1 or run.k_layers > len(run.widths) - 1:
        raise ConfigError("k_layers must be within the layer count")
    if run.kpd.rank_r >= min(min(run.widths[i], run.widths[i + 1])
                             for i in range(len(run.widths) - 1)):
        raise ConfigError("rank_r must be below every layer's full rank")
    if run.iterations < 0 or run.base_epochs < 0 or run.batch_size < 1:
        raise ConfigError("iterations/base_epochs/batch_size out of range")


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(raw)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="ascii")


def cmd_gen_data(config: ExperimentConfig, out_dir: Path) -> int:
    task = fscil.generate_task(config.spec)
    out_dir.mkdir(parents=True, exist_ok=True)
    for session in task.sessions:
        for split_name, split in (("train", session.train), ("test", session.test)):
            rows, labels = [], []
            for c in sorted(split):
                rows.append(split[c])
                labels.extend([c] * split[c].shape[0])
            stacked = np.concatenate(rows, axis=0)
            stem = f"session_{session.session_id:02d}_{split_name}"
            numkernel.save_matrix(out_dir / f"{stem}.mat", stacked)
            label_lines = ["index,class_id"] + [f"{i},{c}" for i, c in enumerate(labels)]
            (out_dir / f"{stem}_labels.csv").write_text(
                "\n".join(label_lines) + "\n", encoding="ascii"
            )
    logger.info("wrote %d sessions to %s", len(task.sessions), out_dir)
    return 0


def cmd_run(config: ExperimentConfig, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    hashes = []

    state = fscil.start_experiment(config.spec, config.strategy, config.run)
    hashes.append(backbone_hash(state.model))
    logger.info("session 0 backbone hash %s", hashes[-1])
    for data in state.task.sessions[1:]:
        fscil.run_incremental_session(state, data)
        hashes.append(backbone_hash(state.model))
        logger.info("session %d backbone hash %s", data.session_id, hashes[-1])
    metrics = fscil.finish_experiment(state)

    (out_dir / "metrics.csv").write_text(fscil.metrics_to_csv(metrics), encoding="ascii")
    _write_json(out_dir / "summary.json", {
        "avg": metrics.avg,
        "pd": metrics.pd,
        "strategy": metrics.strategy,
        "seed": metrics.seed,
        "backbone_hashes": hashes,
    })
    for report in state.reports:
        _write_json(out_dir / f"asr_session_{report.session_id:02d}.json",
                    als.report_to_dict(report))
    save_checkpoint(out_dir / "checkpoint", state.model, state.clf)
    save_buffer(out_dir / "buffer.txt", state.buffer)
    logger.info("run complete: AVG=%.4f PD=%.4f", metrics.avg, metrics.pd)
    return 0


def cmd_decompose(weight_file, activation_file, rank: int, out_dir: Path,
                  kpd_cfg: KpdConfig) -> int:
    w = numkernel.load_matrix(weight_file)
    feats = numkernel.load_matrix(activation_file)
    sigma = compute_input_covariance(ActivationCapture(layer_id=0, features=feats))
    cfg = KpdConfig(rank_r=rank, lambda0=kpd_cfg.lambda0,
                    inverse_threshold=kpd_cfg.inverse_threshold,
                    max_doublings=kpd_cfg.max_doublings)
    layer = decompose(w, sigma, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_decomposed(out_dir, layer)
    recon = layer.w_frozen + layer.b @ layer.a
    rel_err = float(np.linalg.norm(w - recon) / max(np.linalg.norm(w), 1e-30))
    _write_json(out_dir / "report.json", {
        "rank_r": rank,
        "singular_values": [float(v) for v in layer.singular_values],
        "reconstruction_error": rel_err,
        "asr": als.compute_asr(layer.singular_values, rank),
        "lambda_final": layer.lambda_final,
    })
    return 0


def cmd_asr_report(checkpoint_dir, buffer_file, rank: int, k: int | None, out_dir: Path,
                   kpd_cfg: KpdConfig) -> int:
    model, _ = load_checkpoint(checkpoint_dir)
    buffer = load_buffer(buffer_file)
    cfg = KpdConfig(rank_r=rank, lambda0=kpd_cfg.lambda0,
                    inverse_threshold=kpd_cfg.inverse_threshold,
                    max_doublings=kpd_cfg.max_doublings)
    if k is None:
        k = model.num_layers
    report, _ = als.session_selection(model, buffer, cfg, k)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "asr.csv").write_text(als.report_to_csv(report), encoding="ascii")
    _write_json(out_dir / "asr.json", als.report_to_dict(report))
    return 0


def cmd_probe_dropout(config: ExperimentConfig, rate: float, session: int,
                      out_dir: Path) -> int:
    state = fscil.start_experiment(config.spec, config.strategy, config.run)
    if not 1 <= session <= config.spec.num_incremental:
        raise ConfigError(f"probe session must be in [1, {config.spec.num_incremental}]")
    for data in state.task.sessions[1:]:
        if data.session_id < session:
            fscil.run_incremental_session(state, data)
        elif data.session_id == session:
            fscil.prepare_incremental_session(state, data)
            fscil.train_incremental_session(state, data)
            state.session_index = session
            base_acc, novel_acc = fscil.dropout_probe(state, rate)
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "probe.csv").write_text(
                "rate,acc_base,acc_novel\n"
                f"{rate:.17g},{base_acc:.17g},{novel_acc:.17g}\n",
                encoding="ascii",
            )
            _write_json(out_dir / "probe.json", {
                "rate": rate,
                "session": session,
                "strategy": config.strategy,
                "seed": config.spec.seed,
                "acc_base": base_acc,
                "acc_novel": novel_acc,
            })
            return 0
    raise ConfigError("probe session not reached")


def cmd_metrics(csv_path, out_path: Path | None) -> int:
    records = fscil.parse_metrics_csv(Path(csv_path).read_text(encoding="ascii"))
    metrics = fscil.compute_metrics(records)
    payload = {"avg": metrics.avg, "pd": metrics.pd}
    text = json.dumps(payload, sort_keys=True)
    if out_path is not None:
        out_path.write_text(text + "\n", encoding="ascii")
    print(text)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ckpd",
        description="Covariance-guided weight decomposition and class-incremental experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("gen-data", help="write synthetic session datasets")
    add_common(p)

    p = sub.add_parser("run", help="run a full experiment")
    add_common(p)
    p.add_argument("--strategy", default=None, choices=fscil.STRATEGIES)
    p.add_argument("--rank", type=int, default=None, help="override adapter rank")
    p.add_argument("--k", type=int, default=None, help="override selected layer count")

    p = sub.add_parser("decompose", help="decompose one weight matrix against activations")
    p.add_argument("weight_file")
    p.add_argument("activation_file")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("asr-report", help="sensitivity report for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("buffer_file")
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("probe-dropout", help="adapter-output dropout robustness probe")
    add_common(p)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--session", type=int, default=None,
                   help="incremental session to probe (default: last)")
    p.add_argument("--strategy", default=None, choices=fscil.STRATEGIES)

    p = sub.add_parser("metrics", help="recompute AVG/PD from a metrics CSV")
    p.add_argument("csv_path")
    p.add_argument("--out", default=None)
    return parser


def _configure_logging() -> None:
    level_name = os.environ.get("CKPD_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise ConfigError(f"CKPD_LOG must be one of {sorted(levels)}, got {level_name!r}")
    logging.basicConfig(level=levels[level_name], format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    try:
        _configure_logging()
        args = _build_parser().parse_args(argv)
        if args.command == "gen-data":
            config = load_config(args.config, {"seed": args.seed})
            return cmd_gen_data(config, Path(args.out or config.out_dir or "data"))
        if args.command == "run":
            config = load_config(args.config, {
                "seed": args.seed, "strategy": args.strategy,
                "rank_r": args.rank, "k_layers": args.k,
            })
            return cmd_run(config, Path(args.out or config.out_dir or "run_out"))
        if args.command == "decompose":
            return cmd_decompose(args.weight_file, args.activation_file, args.rank,
                                 Path(args.out or "decompose_out"), KpdConfig(rank_r=args.rank))
        if args.command == "asr-report":
            defaults = KpdConfig()
            rank = defaults.rank_r if args.rank is None else args.rank
            return cmd_asr_report(args.checkpoint, args.buffer_file, rank, args.k,
                                  Path(args.out or "asr_out"), defaults)
        if args.command == "probe-dropout":
            config = load_config(args.config, {"seed": args.seed, "strategy": args.strategy})
            session = args.session if args.session is not None else config.spec.num_incremental
            return cmd_probe_dropout(config, args.rate, session,
                                     Path(args.out or "probe_out"))
        if args.command == "metrics":
            return cmd_metrics(args.csv_path, Path(args.out) if args.out else None)
        raise ConfigError(f"unhandled command {args.command!r}")
    except (NumericalFailure, RegularizationFailure, DegenerateCovariance) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except CkpdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
