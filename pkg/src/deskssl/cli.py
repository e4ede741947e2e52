"""Command-line entry point.

Verbs:
  train       --config FILE [--key=value ...]   run one experiment
  grid        --spec FILE                       run a sweep and write reports
  eval        --checkpoint DIR [--dataset SEL]  probe a saved model
  invariance  --checkpoint DIR [--views N] [--images N]
  report      --dir DIR                         rebuild reports from run dirs

SEL is `synthetic`, `synthetic:N`, or `cifar:PATH`. The output root comes
from run.out in the config, else $DESKSSL_OUT, else ./runs.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import evaluation, harness
from .checkpoint import checkpoint_load
from .config import load_config, load_grid, parse_cli_overrides
from .errors import ConfigError, DeskSSLError


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deskssl", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="run one experiment")
    t.add_argument("--config", default=None, help="flat key/value config file")

    g = sub.add_parser("grid", help="run a sweep")
    g.add_argument("--spec", required=True, help="grid spec file (sweep.* keys)")

    e = sub.add_parser("eval", help="probe a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", default=None, help="synthetic[:N] or cifar:PATH")

    i = sub.add_parser("invariance", help="invariance score of a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--dataset", default=None)
    i.add_argument("--views", type=int, default=None)
    i.add_argument("--images", type=int, default=None)

    r = sub.add_parser("report", help="rebuild report CSVs from run dirs")
    r.add_argument("--dir", required=True)
    return p


def _apply_selector(cfg, selector: str | None):
    if selector is None:
        return cfg
    source, _, arg = selector.partition(":")
    kv = {"data.source": source}
    if source == "synthetic":
        if arg:
            kv["data.n_samples"] = arg
    elif source == "cifar":
        if not arg:
            raise ConfigError("cifar selector needs a path: cifar:/path/to/batch.bin")
        kv["data.path"] = arg
    else:
        raise ConfigError(f"unknown dataset selector {selector!r}")
    return cfg.replace_keys(kv)


def _print_rows(rows: list[dict]) -> None:
    for r in rows:
        print(",".join(str(r[c]) for c in harness.RESULT_COLUMNS))


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = _build_parser()
    ns, extra = parser.parse_known_args(argv)
    try:
        if ns.verb == "train":
            cfg = load_config(ns.config, parse_cli_overrides(extra))
            rows = harness.run_experiment(cfg)
            print(",".join(harness.RESULT_COLUMNS))
            _print_rows(rows)
        elif ns.verb == "grid":
            if extra:
                raise ConfigError(f"unexpected argument {extra[0]!r}")
            spec = load_grid(ns.spec)
            rows = harness.run_grid(spec)
            out = harness.resolve_out_root(spec.base)
            for kind, path in harness.write_report(rows, out).items():
                print(f"{kind}: {path}")
        elif ns.verb == "eval":
            if extra:
                raise ConfigError(f"unexpected argument {extra[0]!r}")
            state, cfg = checkpoint_load(ns.checkpoint)
            cfg = _apply_selector(cfg, ns.dataset)
            train_ds, val_ds = harness.build_datasets(cfg)
            probe = train_ds.take(range(min(cfg.data.probe_train_samples, len(train_ds))))
            print("metric,value")
            for metric, value in harness.evaluate_params(state.teacher, cfg, probe, val_ds):
                print(f"{metric},{harness.fmt_value(value)}")
        elif ns.verb == "invariance":
            if extra:
                raise ConfigError(f"unexpected argument {extra[0]!r}")
            state, cfg = checkpoint_load(ns.checkpoint)
            cfg = _apply_selector(cfg, ns.dataset)
            _, val_ds = harness.build_datasets(cfg)
            n_img = ns.images or min(cfg.eval.invariance_images, len(val_ds))
            rep = evaluation.invariance_metric(
                state.teacher,
                val_ds.image_batch(range(min(n_img, len(val_ds)))),
                cfg.aug,
                n_views=ns.views or cfg.eval.invariance_views,
                seed=cfg.eval.seed,
            )
            print("metric,value")
            print(f"mean_pos_cos,{rep.mean_pos_cos!r}")
            print(f"mean_neg_cos,{rep.mean_neg_cos!r}")
            print(f"normalized_sim,{harness.fmt_value(rep.normalized_sim)}")
        elif ns.verb == "report":
            if extra:
                raise ConfigError(f"unexpected argument {extra[0]!r}")
            rows = harness.collect_summary(ns.dir)
            for kind, path in harness.write_report(rows, ns.dir).items():
                print(f"{kind}: {path}")
    except DeskSSLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
