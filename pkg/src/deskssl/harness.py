"""Experiment execution: single runs, grids, and reports.

A run directory holds the resolved config, a metrics CSV (one row per step,
wallclock appended as the only nondeterministic column), a results CSV (one
row per eval point and metric, fully deterministic), and a checkpoint that is
refreshed at every eval point. Reruns of a completed run return the cached
results; interrupted runs resume from the checkpoint bit-exactly because
batches, view draws, and mask draws are all pure functions of (seed, step).
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from io import StringIO

import numpy as np

from . import augment, checkpoint, datasets, evaluation, trainer
from .config import GridSpec, RunConfig, serialize_config
from .errors import ConfigError, HarnessError
from .trainer import METRIC_FIELDS

log = logging.getLogger("deskssl")

RESULT_COLUMNS = ("run_id", "step", "metric", "value")
SUMMARY_COLUMNS = (
    "run_id",
    "mode",
    "n_samples",
    "total_steps",
    "model",
    "status",
    "step",
    "metric",
    "value",
)
EVAL_METRICS = (
    "linear_acc",
    "knn_acc",
    "invariance_mean_pos",
    "invariance_normalized",
)

# validation samples come from an independent seed so the val set stays fixed
# while train-set size sweeps grow a nested prefix
_VAL_SEED_BUMP = 1_000_003


def resolve_out_root(cfg: RunConfig) -> str:
    return cfg.run.out or os.environ.get("DESKSSL_OUT", "") or "./runs"


def run_dir(cfg: RunConfig) -> str:
    return os.path.join(resolve_out_root(cfg), cfg.run_id())


def fmt_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_value(v) for v in row])
    return buf.getvalue()


def _write_csv(path: str, header, rows) -> None:
    _atomic_write_text(path, _csv_text(header, rows))


# ---------------------------------------------------------------------------
# data and batching
# ---------------------------------------------------------------------------


def build_datasets(cfg: RunConfig):
    """(ssl train set, held-out val set) per the data selector."""
    d = cfg.data
    d.validate()
    if d.source == "synthetic":
        train = datasets.synth_generate(
            datasets.SyntheticSpec(
                n_samples=d.n_samples,
                image_size=d.image_size,
                noise_std=d.noise_std,
                seed=d.seed,
            )
        )
        val = datasets.synth_generate(
            datasets.SyntheticSpec(
                n_samples=d.val_samples,
                image_size=d.image_size,
                noise_std=d.noise_std,
                seed=d.seed + _VAL_SEED_BUMP,
            )
        )
        return train, val
    full = datasets.load_cifar_binary(d.path)
    if d.n_samples + d.val_samples > len(full):
        raise ConfigError(
            f"{d.n_samples}+{d.val_samples} samples requested from "
            f"{len(full)}-record file {d.path}"
        )
    train = full.take(range(d.n_samples))
    val = full.take(range(len(full) - d.val_samples, len(full)))
    return train, val


def eval_schedule(total_steps: int, n_points: int) -> list[int]:
    """Eval step numbers: every 1/n_points of the run plus the final step."""
    if total_steps == 0:
        return [0]
    points = {round(total_steps * j / n_points) for j in range(1, n_points + 1)}
    points.add(total_steps)
    return sorted(p for p in points if p > 0)


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Sample ids for one step; pure in (n, batch_size, step, seed)."""
    per_epoch = n // batch_size
    if per_epoch < 1:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n}")
    epoch, slot = divmod(step, per_epoch)
    perm = datasets.epoch_permutation(n, seed, epoch)
    return perm[slot * batch_size : (slot + 1) * batch_size]


def batch_viewsets(cfg: RunConfig, dataset, step: int):
    """Views and mask plans for one step.

    Draw keys depend on (train.seed, step, position) but never on the mode,
    so grid cells differing only in mode see identical geometric streams.
    Plans are skipped entirely when the masked loss is off.
    """
    ids = batch_indices(len(dataset), cfg.train.batch_size, step, cfg.train.seed)
    viewsets = []
    for j, i in enumerate(ids):
        rng = augment.SampleRng.from_key(cfg.train.seed, 0xA46, step, j)
        viewsets.append(augment.generate_views(dataset.image(int(i)), cfg.aug, rng))
    plans = None
    if cfg.train.ibot_weight > 0 and cfg.train.mask_ratio > 0:
        g = cfg.model.grid_size
        plans = [
            [
                augment.sample_mask_plan(
                    np.random.default_rng(
                        np.random.SeedSequence((cfg.train.seed, 0xA47, step, j, v))
                    ),
                    cfg.train.mask_ratio,
                    (g, g),
                )
                for v in range(cfg.aug.n_global)
            ]
            for j in range(len(ids))
        ]
    return viewsets, plans, ids


# ---------------------------------------------------------------------------
# single run
# ---------------------------------------------------------------------------


def _read_results(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def _read_metric_rows(path: str, up_to_step: int) -> list[list[str]]:
    if not os.path.exists(path):
        return []
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    return [r for r in rows[1:] if r and int(r[0]) <= up_to_step]


def _read_partial_results(path: str, up_to_step: int) -> list[list]:
    if not os.path.exists(path):
        return []
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    return [r for r in rows[1:] if r and int(r[1]) <= up_to_step]


def evaluate_params(params, cfg: RunConfig, probe_tr, val_ds) -> list[tuple[str, object]]:
    """All eval metrics for one frozen model; shared by runs and the CLI."""
    tr = evaluation.extract_features(params, probe_tr, split="probe-train")
    va = evaluation.extract_features(params, val_ds, split="val")
    k = min(cfg.eval.knn_k, len(tr))
    n_inv = min(cfg.eval.invariance_images, len(val_ds))
    inv = evaluation.invariance_metric(
        params,
        val_ds.image_batch(range(n_inv)),
        cfg.aug,
        n_views=cfg.eval.invariance_views,
        seed=cfg.eval.seed,
    )
    return [
        ("linear_acc", evaluation.linear_probe(tr, va).accuracy),
        ("knn_acc", evaluation.knn_probe(tr, va, k=k).accuracy),
        ("invariance_mean_pos", inv.mean_pos_cos),
        ("invariance_normalized", inv.normalized_sim),
    ]


def run_experiment(cfg: RunConfig, stop_after: int | None = None) -> list[dict] | None:
    """Train to total_steps with scheduled evals; idempotent per run id.

    Completed runs short-circuit to their cached results. ``stop_after``
    ends the process early after saving a checkpoint (returns None), which
    the next invocation resumes bit-exactly.
    """
    cfg.validate()
    rd = run_dir(cfg)
    resolved = serialize_config(cfg)
    results_path = os.path.join(rd, "results.csv")
    config_path = os.path.join(rd, "config.txt")
    metrics_path = os.path.join(rd, "metrics.csv")
    ckpt_path = os.path.join(rd, "checkpoint")

    if os.path.exists(config_path):
        with open(config_path, "r", encoding="utf-8") as f:
            if f.read() != resolved:
                raise HarnessError(
                    f"run dir {rd} already holds a different config; "
                    f"pick a new run id"
                )
        if os.path.exists(results_path):
            return _read_results(results_path)
    os.makedirs(rd, exist_ok=True)
    _atomic_write_text(config_path, resolved)

    train_ds, val_ds = build_datasets(cfg)
    probe_tr = train_ds.take(range(min(cfg.data.probe_train_samples, len(train_ds))))

    if os.path.exists(ckpt_path):
        state, ck_cfg = checkpoint.checkpoint_load(ckpt_path)
        if ck_cfg.content_hash() != cfg.content_hash():
            raise HarnessError(f"checkpoint in {rd} belongs to a different config")
        log.info("resuming %s from step %d", cfg.run_id(), state.step)
    else:
        state = trainer.init_train_state(cfg.model, cfg.train)

    total = cfg.train.total_steps
    points = eval_schedule(total, cfg.eval.n_points)
    target = total if stop_after is None else min(stop_after, total)
    metric_rows = _read_metric_rows(metrics_path, state.step)
    partial_path = os.path.join(rd, "results_partial.csv")
    results = _read_partial_results(partial_path, state.step)
    header = list(METRIC_FIELDS) + ["wallclock_s"]
    entropy_floor = 0.1 * math.log(cfg.model.num_prototypes)

    def evaluate_now():
        pairs = evaluate_params(state.teacher, cfg, probe_tr, val_ds)
        for metric, value in pairs:
            results.append([cfg.run_id(), state.step, metric, value])
        log.info(
            "%s step %d/%d: %s",
            cfg.run_id(),
            state.step,
            total,
            " ".join(f"{k}={fmt_value(v)}" for k, v in pairs),
        )

    if total == 0 and not results:
        evaluate_now()

    while state.step < target:
        t0 = time.perf_counter()
        viewsets, plans, ids = batch_viewsets(cfg, train_ds, state.step)
        state, m = trainer.train_step(state, viewsets, plans, cfg.train, batch_ids=ids)
        metric_rows.append([fmt_value(v) for v in m.as_row()] + [f"{time.perf_counter() - t0:.3f}"])
        if state.step in points:
            evaluate_now()
            checkpoint.checkpoint_save(state, cfg, ckpt_path)
            _write_csv(metrics_path, header, metric_rows)
            _write_csv(partial_path, RESULT_COLUMNS, results)

    checkpoint.checkpoint_save(state, cfg, ckpt_path)
    _write_csv(metrics_path, header, metric_rows)
    _write_csv(partial_path, RESULT_COLUMNS, results)
    if stop_after is not None and state.step < total:
        return None

    low = sum(1 for r in metric_rows if float(r[6]) < entropy_floor)
    collapsed = int(total > 0 and low > 0.1 * total)
    results.append([cfg.run_id(), state.step, "collapsed", collapsed])
    _write_csv(results_path, RESULT_COLUMNS, results)
    return _read_results(results_path)


# ---------------------------------------------------------------------------
# grids and reports
# ---------------------------------------------------------------------------


def _model_label(cfg: RunConfig) -> str:
    return f"d{cfg.model.embed_dim}x{cfg.model.depth}"


def _summary_rows_for(cfg: RunConfig, result_rows: list[dict], status: str) -> list[dict]:
    out = []
    for r in result_rows:
        out.append(
            {
                "run_id": cfg.run_id(),
                "mode": cfg.aug.mode,
                "n_samples": cfg.data.n_samples,
                "total_steps": cfg.train.total_steps,
                "model": _model_label(cfg),
                "status": status,
                "step": r["step"],
                "metric": r["metric"],
                "value": r["value"],
            }
        )
    return out


def run_grid(grid: GridSpec) -> list[dict]:
    """Run every cell, skipping completed ones; failures are recorded rows."""
    grid.validate()
    rows: list[dict] = []
    for cell in grid.cells():
        try:
            res = run_experiment(cell)
        except Exception as exc:  # per-cell isolation: the grid must finish
            log.warning("cell %s failed: %s", cell.run_id(), exc)
            rows += _summary_rows_for(
                cell, [{"step": "", "metric": "error", "value": str(exc)}], "failed"
            )
            continue
        rows += _summary_rows_for(cell, res, "ok")
    return rows


def collect_summary(root: str) -> list[dict]:
    """Rebuild grid summary rows from run directories under ``root``."""
    from .config import from_flat, parse_kv_text

    rows: list[dict] = []
    for name in sorted(os.listdir(root)):
        rd = os.path.join(root, name)
        cfg_path = os.path.join(rd, "config.txt")
        if not os.path.isfile(cfg_path):
            continue
        with open(cfg_path, "r", encoding="utf-8") as f:
            cfg = from_flat(parse_kv_text(f.read()))
        results_path = os.path.join(rd, "results.csv")
        if os.path.exists(results_path):
            rows += _summary_rows_for(cfg, _read_results(results_path), "ok")
        else:
            rows += _summary_rows_for(
                cfg, [{"step": "", "metric": "error", "value": "incomplete"}], "incomplete"
            )
    return rows


def write_report(summary_rows: list[dict], out_dir: str) -> dict[str, str]:
    """Emit the machine summary, a tidy final-step table, and mode gaps.

    Column orders are fixed by the constants in this module; rows are sorted,
    so the files are byte-stable for the same summary.
    """
    if not summary_rows:
        raise HarnessError("empty summary; nothing to report")
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "summary": os.path.join(out_dir, "summary.csv"),
        "tidy": os.path.join(out_dir, "report_tidy.csv"),
        "gap": os.path.join(out_dir, "report_gap.csv"),
    }
    _write_csv(
        paths["summary"],
        SUMMARY_COLUMNS,
        [[r[c] for c in SUMMARY_COLUMNS] for r in summary_rows],
    )

    final = [
        r
        for r in summary_rows
        if r["status"] == "ok" and str(r["step"]) == str(r["total_steps"])
    ]
    tidy_cols = ("mode", "n_samples", "total_steps", "model", "metric", "value")
    tidy = sorted(
        ([r[c] for c in tidy_cols] for r in final),
        key=lambda row: (row[4], int(row[1]), int(row[2]), row[3], row[0]),
    )
    _write_csv(paths["tidy"], tidy_cols, tidy)

    by_cell: dict[tuple, dict[str, str]] = {}
    for r in final:
        key = (int(r["n_samples"]), int(r["total_steps"]), r["model"], r["metric"])
        by_cell.setdefault(key, {})[r["mode"]] = r["value"]
    gap_rows = []
    for key in sorted(by_cell, key=lambda k: (k[3], k[0], k[1], k[2])):
        modes = by_cell[key]
        if "original" not in modes or "crop" not in modes:
            continue
        try:
            orig, crop = float(modes["original"]), float(modes["crop"])
        except ValueError:
            continue  # non-numeric metric (e.g. "undefined")
        gap_rows.append(list(key) + [orig, crop, orig - crop])
    _write_csv(
        paths["gap"],
        ("n_samples", "total_steps", "model", "metric", "original", "crop", "gap_original_minus_crop"),
        gap_rows,
    )
    return paths
