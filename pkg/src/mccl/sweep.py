"""Hyperparameter sweeps: one full train+eval per value, shared seed."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig
from .data import Dataset
from .errors import ConfigError
from .harness import evaluate_model, train
from .metrics import MetricsReport

SWEEPABLE = ("k", "lambda", "tau", "stages")


def parse_sweep_values(param: str, text: str) -> list:
    """``k``/``lambda``/``tau`` take comma-separated scalars; ``stages``
    takes semicolon-separated index lists (e.g. ``-1;-2,-1``)."""
    if param not in SWEEPABLE:
        raise ConfigError(f"sweep: unknown parameter {param!r} (choose from {SWEEPABLE})")
    try:
        if param == "k":
            return [int(v) for v in text.split(",")]
        if param in ("lambda", "tau"):
            return [float(v) for v in text.split(",")]
        return [tuple(int(i) for i in part.split(",")) for part in text.split(";")]
    except ValueError as exc:
        raise ConfigError(f"sweep: bad values {text!r} for {param}: {exc}") from exc


def _apply(config: RunConfig, param: str, value) -> RunConfig:
    cfg = copy.deepcopy(config)
    field = {"k": "k", "lambda": "momentum", "tau": "tau", "stages": "stages"}[param]
    setattr(cfg, field, value)
    cfg.validate()
    return cfg


@dataclass
class SweepRow:
    value: object
    report: MetricsReport


def sweep(
    config: RunConfig,
    train_ds: Dataset,
    eval_ds: Dataset,
    param: str,
    values: list,
    out_dir: str | Path | None = None,
) -> list[SweepRow]:
    if not values:
        raise ConfigError("sweep: empty value list")
    rows = []
    for value in values:
        cfg = _apply(config, param, value)
        run_out = None
        if out_dir is not None:
            run_out = Path(out_dir) / f"{param}_{_slug(value)}"
        result = train(cfg, train_ds, eval_ds, out_dir=run_out)
        report = evaluate_model(
            result.checkpoint.model,
            result.checkpoint.ema,
            eval_ds,
            cfg.threshold,
            cfg.batch_size,
        )
        rows.append(SweepRow(value=value, report=report))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.txt").write_text(format_table(param, rows), encoding="utf-8")
    return rows


def _slug(value) -> str:
    if isinstance(value, tuple):
        return "_".join(str(v) for v in value).replace("-", "m")
    return str(value).replace(".", "p").replace("-", "m")


def format_table(param: str, rows: list[SweepRow]) -> str:
    header = f"{param:>12}  macro_f1  micro_f1  samples_f1    mean_ap  macro_auc"
    lines = [header, "-" * len(header)]
    for row in rows:
        r = row.report
        value = ",".join(str(v) for v in row.value) if isinstance(row.value, tuple) else row.value
        lines.append(
            f"{value!s:>12}  {r.macro_f1:8.4f}  {r.micro_f1:8.4f}  "
            f"{r.samples_f1:10.4f}  {r.mean_ap:9.4f}  {r.macro_auc:9.4f}"
        )
    return "\n".join(lines) + "\n"
