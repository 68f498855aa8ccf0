"""Experiment runners behind the CLI: training, ablation cells, spectral report, attention dumps."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import config as cf
from .experiments import spectral_response, two_cluster_graph
from .graph import homophily_metrics
from .message_passing import frequency_energy
from .model import build_model, dump_attention, encode, load_checkpoint, read_manifest, save_checkpoint
from .trainer import RunReport, ablation_run, cell_name, generate_task, train

SUMMARY_FIELDS = ["index", "cell", "status", "seed", "steps", "initial_loss", "final_loss", "loss_ratio",
                  "eval_loss", "eval_accuracy", "mean_p", "trainable_params", "error"]


def build_run(cfg: dict):
    mcfg = cf.model_config(cfg)
    model = build_model(mcfg, cfg["seed"])
    ds = generate_task(cf.task_spec(cfg), mcfg.enc_tokens, mcfg.enc_in)
    return model, ds


def run_training(cfg: dict, out_dir=None) -> tuple[RunReport, object]:
    """Train one configuration; writes report.json, curves.csv and checkpoint/ when ``out_dir`` is set."""
    model, ds = build_run(cfg)
    report = train(model, ds, cf.train_config(cfg), config_echo=cfg)
    if out_dir is not None:
        out_dir = Path(out_dir)
        report.write(out_dir)
        save_checkpoint(model, out_dir / "checkpoint", run_config=cfg)
    return report, model


def _tail_mean(xs, k: int = 20) -> float:
    return float(np.mean(xs[-k:])) if xs else math.nan


def summary_row(index: int, cell: dict, report: RunReport, cfg: dict) -> dict:
    init = report.losses[0] if report.losses else math.nan
    final = _tail_mean(report.losses)
    ps = [v for v in (report.p_trajectory[-1] if report.p_trajectory else []) if math.isfinite(v)]
    return {
        "index": index, "cell": cell_name(cell), "status": report.status, "seed": cfg["seed"],
        "steps": len(report.losses), "initial_loss": init, "final_loss": final,
        "loss_ratio": final / init if init else math.nan,
        "eval_loss": report.eval_loss[-1] if report.eval_loss else math.nan,
        "eval_accuracy": report.eval_accuracy[-1] if report.eval_accuracy else math.nan,
        "mean_p": float(np.mean(ps)) if ps else math.nan,
        "trainable_params": report.param_counts.get("trainable", 0), "error": report.error or "",
    }


def _finite_or_none(row: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in row.items()}


def run_cell(base_cfg: dict, cell: dict, index: int, cell_dir=None) -> dict:
    """One ablation cell with a fresh model.  A cell whose row.json exists (written last)
    is not rerun; failed cells are retried."""
    cfg = cf.apply_cell(base_cfg, cell)
    cfg["train"]["steps"] = int(base_cfg["ablation"]["steps"])
    cell_dir = None if cell_dir is None else Path(cell_dir)
    if cell_dir is not None and (cell_dir / "row.json").exists():
        return json.loads((cell_dir / "row.json").read_text())
    try:
        report, _ = run_training(cfg, cell_dir)
        row = _finite_or_none(summary_row(index, cell, report, cfg))
    except Exception as exc:  # recorded, the sweep continues
        row = {k: "" for k in SUMMARY_FIELDS}
        row.update(index=index, cell=cell_name(cell), status="failed", seed=cfg["seed"], error=repr(exc))
        if cell_dir is not None:
            cell_dir.mkdir(parents=True, exist_ok=True)
            (cell_dir / "failure.json").write_text(json.dumps(row, indent=2))
        return row
    if cell_dir is not None:
        (cell_dir / "row.json").write_text(json.dumps(row, indent=2, sort_keys=True))
    return row


def _fmt(v):
    if isinstance(v, float):
        return "" if not math.isfinite(v) else repr(v)
    return v


def write_summary(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for row in sorted(rows, key=lambda r: int(r["index"])):
            w.writerow({k: _fmt(row.get(k, "")) for k in SUMMARY_FIELDS})


def run_ablation(cfg: dict, out_dir, jobs: int = 1, grids=None) -> dict:
    """All configured grids; one subdirectory per cell under ``out_dir/<grid>/`` and a
    summary.csv with one row per cell."""
    out_dir = Path(out_dir)
    grids = list(cfg["ablation"]["grids"] if grids is None else grids)
    unknown = [g for g in grids if g not in cf.ABLATION_GRIDS]
    if unknown or not grids:
        raise cf.ConfigError(f"unknown or empty ablation grids {unknown or grids}; known: {sorted(cf.ABLATION_GRIDS)}")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cf.dumps(cfg))
    all_rows = []
    for name in grids:
        rows = ablation_run(cfg, cf.ABLATION_GRIDS[name], run_cell, out_dir / name, jobs)
        for r in rows:
            r["grid"] = name
        write_summary(rows, out_dir / name / "summary.csv")
        all_rows.extend(rows)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["grid"] + SUMMARY_FIELDS)
        w.writeheader()
        for r in all_rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in ["grid"] + SUMMARY_FIELDS})
    return {"cells": len(all_rows), "failed": [r["cell"] for r in all_rows if r["status"] == "failed"]}


def spectral_report(cfg: dict) -> dict:
    s = cfg["spectral"]
    if not s["p_list"]:
        raise cf.ConfigError("spectral.p_list must not be empty")
    g = two_cluster_graph(s["n_query"], s["n_value"], s["dim"], s["separation"], s["noise"], s["seed"])
    rows = spectral_response(g, s["p_list"], s["mu"])
    ref = {r["p"]: r["retention"]["high"] for r in rows}
    energy = frequency_energy(g, g.X)
    return {
        "config": cfg,
        "graph": {"n_query": g.n_query, "n_value": g.n_value, "dim": s["dim"], "seed": s["seed"]},
        "homophily": homophily_metrics(g),
        "eigenvalues": [float(v) for v in energy["eigenvalues"]],
        "responses": rows,
        "high_retention_by_p": {str(k): v for k, v in ref.items()},
    }


def _write_long(path, m: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_index", "key_index", "value"])
        for i, j in np.ndindex(m.shape):
            w.writerow([i, j, repr(float(m[i, j]))])


def _write_row(path, row: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key_index", "value"])
        for j, v in enumerate(row):
            w.writerow([j, repr(float(v))])


def dump_from_checkpoint(checkpoint, cfg: dict, out_dir) -> dict:
    """Attention of one slot for one eval example of the checkpoint's task.

    Writes M.csv and, for p-adapter slots, M_bar.csv (long format), plus the
    selected query row of each as ``*_row.csv`` with headers ``key_index,value``.
    """
    model = load_checkpoint(checkpoint)
    run_cfg = read_manifest(checkpoint).get("run_config") or cfg
    d = cfg["dump"]
    layer = d["layer"] % model.cfg.layers if d["layer"] < 0 else d["layer"]
    ds = generate_task(cf.task_spec(run_cfg), model.cfg.enc_tokens, model.cfg.enc_in)
    ex = int(d["example"])
    if not 0 <= ex < len(ds.eval):
        raise cf.ConfigError(f"dump.example must lie in [0, {len(ds.eval)})")
    tokens, enc_in, _, _ = ds.eval.batch(ex)
    dumped = dump_attention(model, tokens, encode(model, enc_in), layer, d["which"])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    row = int(d["row"])
    written = []
    for key in ("M", "M_bar"):
        m = dumped.get(key)
        if m is None:
            continue
        if not 0 <= row < m.shape[0]:
            raise cf.ConfigError(f"dump.row must lie in [0, {m.shape[0]})")
        _write_long(out_dir / f"{key}.csv", m)
        _write_row(out_dir / f"{key}_row.csv", m[row])
        written += [f"{key}.csv", f"{key}_row.csv"]
    info = {"checkpoint": str(checkpoint), "layer": layer, "which": d["which"], "example": ex,
            "row": row, "files": written, "config": cfg}
    (out_dir / "dump.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    return info
