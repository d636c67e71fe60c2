"""Command line entry point: ``layerfreeze {train,simulate,svcca,report,bench}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .. import nncore
from ..svcca import ideal_schedule, layer_scores
from .config import ConfigError, load_config, parse_config
from .report import ReportError, load_activations, load_rows, write_report
from .scenario import ROW_COLUMNS, bundled_names, run_scenario
from .train import train


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    out = Path(args.out or "runs/latest")
    report = train(cfg, out)
    summary = write_report(out)
    print(json.dumps({k: summary[k] for k in ("final_accuracy", "final_boundary",
                                              "backward_reduction", "speedup_vs_full",
                                              "oracle_tracking")}, indent=2))
    print(f"wrote {out}  ({report.summary['wall_clock_s']:.1f}s wall clock)")
    return 0


def cmd_simulate(args) -> int:
    source = args.scenario
    if source is None:
        source = load_config(args.config, args.overrides, args.seed).scenario
    if not source:
        raise ConfigError("no scenario given (positional argument or distsim.scenario); "
                          f"bundled: {', '.join(bundled_names())}")
    rep = run_scenario(source)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "plans.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(ROW_COLUMNS), lineterminator="\n")
            w.writeheader()
            w.writerows(rep.rows)
        (out / "totals.json").write_text(json.dumps(rep.totals, indent=2, sort_keys=True) + "\n")
    w = csv.DictWriter(sys.stdout, fieldnames=list(ROW_COLUMNS), lineterminator="\n")
    w.writeheader()
    for row in rep.rows:
        w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})
    for mode, t in rep.totals.items():
        print(f"# {mode:<12} time {t['time']:.2f} s  cost {t['cost']:.2f}  "
              f"speedup {t['speedup_vs_full']:.2f}x")
    return 0


def cmd_svcca(args) -> int:
    run = Path(args.run_dir)
    cfg = parse_config((run / "config.txt").read_text()) if (run / "config.txt").is_file() else None
    threshold = args.threshold if args.threshold is not None else (cfg.svcca_threshold if cfg else 0.9)
    keep = cfg.svcca_variance if cfg else 0.99
    ckpt = run / "checkpoints"
    dirs = sorted(ckpt.glob("interval_*"))
    if not dirs:
        raise ReportError(f"no checkpoint dumps under {ckpt}")
    final = load_activations(ckpt / "final")
    acts = [load_activations(d) for d in dirs]
    ideal = ideal_schedule(acts, final, threshold, keep)
    online = [r["test_boundary"] for r in load_rows(run)]
    print("interval,ideal,online," + ",".join(f"layer_{j}" for j in range(len(final))))
    for t, (a, i) in enumerate(zip(acts, ideal), start=1):
        scores = layer_scores(a, final, keep)
        on = online[t - 1] if t <= len(online) else ""
        print(f"{t},{i},{on}," + ",".join(f"{s:.4f}" for s in scores))
    return 0


def cmd_report(args) -> int:
    summary = write_report(args.run_dir, args.out)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    """Measured forward/backward time against the number of frozen layers."""
    cfg = load_config(args.config, args.overrides, args.seed)
    rng = np.random.default_rng(cfg.seed)
    model = nncore.init_model(rng, cfg.n_features, [cfg.width] * cfg.layers, cfg.n_classes,
                              cfg.activation)
    x = rng.standard_normal((cfg.batch_size, cfg.n_features))
    y = rng.integers(0, cfg.n_classes, size=cfg.batch_size)
    print("frozen,backward_flops,backward_s,forward_s")
    for boundary in range(cfg.layers):
        trace = nncore.forward(model, x)
        _, dlogits = nncore.loss_grad(trace.logits, y)
        t0 = time.perf_counter()
        for _ in range(args.repeats):
            nncore.forward(model, x)
        t1 = time.perf_counter()
        for _ in range(args.repeats):
            nncore.backward(model, trace, dlogits, boundary)
        t2 = time.perf_counter()
        _, bwd = nncore.flop_count(model, cfg.batch_size, boundary)
        print(f"{boundary},{bwd},{(t2 - t1) / args.repeats:.6f},{(t1 - t0) / args.repeats:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    psr = argparse.ArgumentParser(prog="layerfreeze", description=__doc__)
    psr.add_argument("-v", "--verbose", action="store_true", help="log freezing decisions")
    sub = psr.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fine-tune one configuration and write its report")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="cost a distributed scenario with both packing modes")
    p.add_argument("scenario", nargs="?", help="scenario file or bundled name")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("svcca", help="per-layer scores and ideal schedule of a saved run")
    p.add_argument("run_dir")
    p.add_argument("--threshold", type=float)
    _common(p)
    p.set_defaults(func=cmd_svcca)

    p = sub.add_parser("report", help="rewrite the CSV/JSON reports of a saved run")
    p.add_argument("run_dir")
    _common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="time forward/backward passes against the frozen prefix")
    p.add_argument("--repeats", type=int, default=50)
    _common(p)
    p.set_defaults(func=cmd_bench)
    return psr


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ReportError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
