"""Fine-tuning loop: freezing, activation caching, FLOP and simulated-time accounting."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import nncore
from ..cachemgr import (CachePipeline, CacheRecord, StorageManager, record_nbytes, should_cache,
                        step_time, write_records)
from ..freezer import Freezer
from .config import ConfigError, RunConfig
from .data import Task, make_task, perturbed_teacher, relabel

log = logging.getLogger(__name__)

INTERVAL_COLUMNS = ("interval", "epoch", "frozen_boundary", "next_boundary", "test_boundary",
                    "train_loss",
                    "eval_accuracy", "lr", "forward_flops", "backward_flops", "cache_hits",
                    "cache_writes", "simulated_time")


def lr_at(schedule: str, iteration: int, total_iterations: int, base_lr: float,
          decay_points=(0.3, 0.6), decay_factor: float = 0.1) -> float:
    """Learning rate for ``iteration`` (0-based) out of ``total_iterations``."""
    if schedule == "constant":
        return base_lr
    if schedule != "stepped":
        raise ValueError(f"unknown schedule {schedule!r}")
    frac = iteration / total_iterations
    passed = sum(1 for p in decay_points if frac >= p)
    return base_lr * decay_factor**passed


def interval_ends(iters_per_epoch: int, intervals: int) -> list[int]:
    """Iteration counts (within an epoch) after which each interval closes."""
    return [(i + 1) * iters_per_epoch // intervals for i in range(intervals)]


def accuracy(model: nncore.Model, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(nncore.predict(model, x) == y))


def layer_activations(model: nncore.Model, x: np.ndarray) -> list[np.ndarray]:
    return nncore.forward(model, x).per_layer_outputs[:-1]


def build_model(cfg: RunConfig, task: Task, rng: np.random.Generator) -> nncore.Model:
    """Initialise and pre-train on the related distribution."""
    model = nncore.init_model(rng, cfg.n_features, [cfg.width] * cfg.layers, cfg.n_classes,
                              cfg.activation)
    n = task.x_pre.shape[0]
    for _ in range(cfg.pretrain_epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            rows = order[s:s + cfg.batch_size]
            trace = nncore.forward(model, task.x_pre[rows])
            _, dlogits = nncore.loss_grad(trace.logits, task.y_pre[rows])
            nncore.sgd_step(model, nncore.backward(model, trace, dlogits, 0), cfg.pretrain_lr)
    return model


@dataclass
class RunReport:
    config: RunConfig
    rows: list[dict]
    summary: dict
    checkpoints: list[list[np.ndarray]] = field(repr=False, default_factory=list)
    final_activations: list[np.ndarray] = field(repr=False, default_factory=list)
    model: nncore.Model | None = field(repr=False, default=None)
    initial_model: nncore.Model | None = field(repr=False, default=None)


class _BoundaryPolicy:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.freezer = None
        self.boundary = 0
        self.ticks = 0
        if cfg.freezing in ("auto", "observe"):
            self.freezer = Freezer(cfg.layers, cfg.percentile, cfg.percentile_method,
                                   cfg.include_bias)
        elif cfg.freezing == "static":
            self.boundary = cfg.static_prefix

    @property
    def test_boundary(self) -> int:
        """Boundary the gradient-norm test has reached (equals ``boundary`` unless observing)."""
        return self.freezer.frozen_boundary if self.freezer is not None else self.boundary

    def observe(self, grads: nncore.GradientSet) -> None:
        if self.freezer is None:
            return
        if self.cfg.freezing == "observe":
            active = self.freezer.state.active_layers
            grads = nncore.GradientSet(active.start, {j: grads.layers[j] for j in active}, grads.head)
        self.freezer.accumulate(grads)

    def tick(self) -> int:
        self.ticks += 1
        if self.cfg.freezing == "auto":
            self.boundary = self.freezer.tick()
        elif self.cfg.freezing == "observe":
            self.freezer.tick()
        elif self.cfg.freezing == "schedule":
            self.boundary = self.cfg.schedule[self.ticks - 1]
        return self.boundary


def train(cfg: RunConfig, out_dir: str | Path | None = None) -> RunReport:
    """Pre-train, then fine-tune with the configured freezing and caching policy."""
    if cfg.freezing == "static" and cfg.static_prefix >= cfg.layers:
        raise ConfigError("static prefix must leave at least one layer trainable")
    wall_start = time.perf_counter()
    data_seed, init_seed, order_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    task = make_task(np.random.default_rng(data_seed), cfg.n_train, cfg.n_test, cfg.n_features,
                     cfg.n_classes, cfg.noise, cfg.shift, cfg.probe_size, cfg.task)
    model = build_model(cfg, task, np.random.default_rng(init_seed))
    if cfg.task == "teacher":
        task = relabel(task, perturbed_teacher(np.random.default_rng(data_seed), model,
                                                   cfg.teacher_strength))
    initial = model.copy()
    order_rng = np.random.default_rng(order_seed)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    policy = _BoundaryPolicy(cfg)
    n = cfg.n_train
    B = cfg.batch_size
    iters_per_epoch = -(-n // B)
    ends = interval_ends(iters_per_epoch, cfg.intervals_per_epoch)
    total_iters = iters_per_epoch * cfg.epochs
    spf = cfg.seconds_per_flop

    store = pipeline = None
    rec_bytes = record_nbytes(cfg.width)
    read_bw = cfg.cache_read_mbps * 1e6
    write_bw = cfg.cache_write_mbps * 1e6
    if cfg.cache_enabled:
        root = None
        if cfg.cache_disk_mb > 0:
            root = Path(cfg.cache_dir) if cfg.cache_dir else (out or Path(".")) / "cache"
        store = StorageManager(n, int(cfg.cache_memory_mb * 2**20), int(cfg.cache_disk_mb * 2**20),
                               root)
        store.clear()
        if cfg.cache_pipeline == "threaded":
            pipeline = CachePipeline(store)
    caching = False

    def refresh_caching(boundary: int) -> bool:
        if store is None or boundary == 0:
            return False
        prefix_s = sum(nncore.layer_forward_flops(model.layers[j], B) for j in range(boundary)) * spf
        read_s = B * rec_bytes / read_bw
        return should_cache(boundary, prefix_s / boundary, read_s)

    rows, checkpoints = [], []
    boundary = policy.boundary
    if store is not None:
        store.set_boundary(boundary)
        caching = refresh_caching(boundary)
    it = 0
    interval = 0
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        batches = [np.arange(s, min(s + B, n)) for s in range(0, n, B)]
        reads = None
        if store is not None:
            store.register_shuffle(epoch, perm)
            reads = pipeline.epoch(epoch, batches) if pipeline is not None else None
        acc = _IntervalAccumulator()
        for b_idx, positions in enumerate(batches):
            idx = perm[positions]
            x, y = task.x_train[idx], task.y_train[idx]
            if reads is not None:
                recs = next(reads)
            elif store is not None and boundary > 0:
                recs = [store.read(epoch, int(k)) for k in positions]
            else:
                recs = [None] * len(positions)

            fwd_flops = 0
            depths = np.array([0 if r is None else r.depth for r in recs])
            h = np.empty((len(positions), model.input_dim(boundary)))
            for d in np.unique(depths):
                rows_d = np.flatnonzero(depths == d)
                src = x[rows_d] if d == 0 else np.stack([recs[r].payload for r in rows_d])
                h[rows_d] = nncore.forward_prefix(model, src, int(d), boundary)
                fwd_flops += sum(nncore.layer_forward_flops(model.layers[j], len(rows_d))
                                 for j in range(int(d), boundary))
            trace = nncore.forward(model, h, boundary)
            loss, dlogits = nncore.loss_grad(trace.logits, y)
            grads = nncore.backward(model, trace, dlogits, boundary)
            policy.observe(grads)
            lr = lr_at(cfg.lr_schedule, it, total_iters, cfg.lr, cfg.decay_points, cfg.decay_factor)
            nncore.sgd_step(model, grads, lr)
            f, bwd_flops = nncore.flop_count(model, len(positions), boundary, boundary)
            fwd_flops += f

            hits = sum(r is not None for r in recs)
            writes = 0
            if caching:
                for r, k in enumerate(positions):
                    if depths[r] != boundary:
                        rec = CacheRecord(int(idx[r]), boundary, h[r])
                        if pipeline is not None:
                            pipeline.submit(epoch, int(k), rec, h.shape[1])
                        else:
                            store.write(epoch, int(k), rec, expected_dim=h.shape[1])
                        writes += 1
                sim = step_time((fwd_flops + bwd_flops) * spf, hits * rec_bytes, writes * rec_bytes,
                                read_bw, write_bw, cfg.copy_overhead)
            else:
                sim = (fwd_flops + bwd_flops) * spf
            acc.add(loss, lr, fwd_flops, bwd_flops, hits, writes, sim)
            it += 1

            if b_idx + 1 in ends:
                interval += 1
                during = boundary
                boundary = policy.tick()
                if store is not None and boundary != during:
                    store.set_boundary(boundary)
                    caching = caching or refresh_caching(boundary)
                checkpoints.append(layer_activations(model, task.x_probe))
                rows.append({"interval": interval, "epoch": epoch + 1, "frozen_boundary": during,
                             "next_boundary": boundary, "test_boundary": policy.test_boundary,
                             **acc.row(),
                             "eval_accuracy": accuracy(model, task.x_test, task.y_test)})
                acc = _IntervalAccumulator()
        if pipeline is not None:
            pipeline.drain()
        if store is not None:
            store.end_epoch()
    if pipeline is not None:
        pipeline.close()

    rows = [{c: r[c] for c in INTERVAL_COLUMNS} for r in rows]
    final = layer_activations(model, task.x_probe)
    summary = _summary(cfg, model, rows, iters_per_epoch, n)
    summary["wall_clock_s"] = time.perf_counter() - wall_start
    report = RunReport(cfg, rows, summary, checkpoints, final, model, initial)
    if out is not None:
        save_run(report, out)
    return report


class _IntervalAccumulator:
    def __init__(self):
        self.losses = []
        self.lr = 0.0
        self.fwd = self.bwd = self.hits = self.writes = 0
        self.sim = 0.0

    def add(self, loss, lr, fwd, bwd, hits, writes, sim):
        self.losses.append(loss)
        self.lr = lr
        self.fwd += fwd
        self.bwd += bwd
        self.hits += hits
        self.writes += writes
        self.sim += sim

    def row(self) -> dict:
        return {"train_loss": float(np.mean(self.losses)) if self.losses else 0.0, "lr": self.lr,
                "forward_flops": self.fwd, "backward_flops": self.bwd, "cache_hits": self.hits,
                "cache_writes": self.writes, "simulated_time": self.sim}


def _summary(cfg: RunConfig, model: nncore.Model, rows: list[dict], iters_per_epoch: int,
             n: int) -> dict:
    full_fwd = full_bwd = 0
    for s in range(0, n, cfg.batch_size):
        f, b = nncore.flop_count(model, min(cfg.batch_size, n - s), 0, 0)
        full_fwd += f
        full_bwd += b
    full_fwd *= cfg.epochs
    full_bwd *= cfg.epochs
    fwd = sum(r["forward_flops"] for r in rows)
    bwd = sum(r["backward_flops"] for r in rows)
    sim = sum(r["simulated_time"] for r in rows)
    full_sim = (full_fwd + full_bwd) * cfg.seconds_per_flop
    accs = [r["eval_accuracy"] for r in rows]
    return {
        "final_accuracy": accs[-1] if accs else None,
        "best_accuracy": max(accs) if accs else None,
        "final_boundary": rows[-1]["next_boundary"] if rows else 0,
        "forward_flops": fwd,
        "backward_flops": bwd,
        "total_flops": fwd + bwd,
        "simulated_time": sim,
        "full_backward_flops": full_bwd,
        "full_simulated_time": full_sim,
        "backward_reduction": full_bwd / bwd if bwd else None,
        "speedup_vs_full": full_sim / sim if sim else None,
        "iterations": iters_per_epoch * cfg.epochs,
    }


def save_run(report: RunReport, out: Path) -> None:
    """Raw run data; :func:`report.write_report` turns it into CSV/JSON outputs."""
    out = Path(out)
    (out / "config.txt").write_text(report.config.to_text())
    with open(out / "rows.jsonl", "w") as fh:
        for row in report.rows:
            fh.write(json.dumps(row) + "\n")
    stable = {k: v for k, v in report.summary.items() if k != "wall_clock_s"}
    (out / "run_summary.json").write_text(json.dumps(stable, indent=2, sort_keys=True) + "\n")
    (out / "wall_clock.json").write_text(json.dumps({"wall_clock_s": report.summary["wall_clock_s"]}) + "\n")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for t, acts in enumerate(report.checkpoints + [report.final_activations], start=1):
        name = "final" if t > len(report.checkpoints) else f"interval_{t:04d}"
        d = ckpt_dir / name
        d.mkdir(exist_ok=True)
        for j, a in enumerate(acts):
            write_records(d / f"layer_{j:02d}.bin",
                          (CacheRecord(i, j + 1, a[i]) for i in range(a.shape[0])))
