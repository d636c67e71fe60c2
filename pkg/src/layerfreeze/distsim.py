"""Analytic cost model for data-parallel fine-tuning with a frozen layer prefix.

Per iteration, gradient buckets are all-reduced while the backward pass
runs, so an iteration costs ``max(T_comp, T_comm)`` with

    T_comm = k * (alpha * (p - 1) + 2 * b * (p - 1) / (p * BW))

for ``k`` buckets of ``b`` bytes across ``p`` workers.  Freezing shrinks
both terms and also frees memory, which the two packing planners spend
differently:

* Efficiency packing keeps the total batch and sheds workers (lowest cost).
* Performance packing keeps every worker and grows the per-worker batch
  (shortest epoch).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace


class InfeasibleError(ValueError):
    """No batch fits in worker memory at the requested boundary."""


@dataclass(frozen=True)
class ClusterConfig:
    workers: int
    bandwidth: float  # bytes / second
    alpha: float  # seconds per message
    cost_rate: float = 1.0  # currency per worker-second
    memory: float = float("inf")  # bytes per worker

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("need at least one worker")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


@dataclass(frozen=True)
class ModelProfile:
    """Per-layer sizes and a compute-time model for an ``num_layers``-block network.

    Compute time per iteration on one worker is affine in its batch:
    ``tcomp_fixed + batch * (active * tcomp_active_layer + frozen * tcomp_frozen_layer)``.
    Memory is ``weight_bytes + active * grad_bytes_per_layer +
    batch * (base_act_bytes + active * act_bytes_per_layer)``.
    """

    num_layers: int
    bucket_bytes: float
    grad_bytes_per_layer: float
    head_grad_bytes: float = 0.0
    weight_bytes: float = 0.0
    act_bytes_per_layer: float = 0.0
    base_act_bytes: float = 0.0
    tcomp_fixed: float = 0.0
    tcomp_active_layer: float = 0.0
    tcomp_frozen_layer: float = 0.0

    def __post_init__(self):
        if self.num_layers < 1 or self.bucket_bytes <= 0 or self.grad_bytes_per_layer <= 0:
            raise ValueError("profile needs layers, a positive bucket size and gradient bytes")

    def grad_bytes(self, boundary: int) -> float:
        return (self.num_layers - boundary) * self.grad_bytes_per_layer + self.head_grad_bytes

    def buckets(self, boundary: int) -> tuple[int, float, float]:
        """(k, b, b_hat) after removing the frozen layers' bytes from the tail bucket first."""
        total = self.grad_bytes(boundary)
        if total <= 0:
            return 0, self.bucket_bytes, 0.0
        k = math.ceil(total / self.bucket_bytes - 1e-12)
        b_hat = total - (k - 1) * self.bucket_bytes
        return k, self.bucket_bytes, b_hat

    def t_comp(self, boundary: int, batch: int) -> float:
        active = self.num_layers - boundary
        per_sample = active * self.tcomp_active_layer + boundary * self.tcomp_frozen_layer
        return self.tcomp_fixed + batch * per_sample


def t_comm(k: int, b: float, p: int, bandwidth: float, alpha: float) -> float:
    """All-reduce time of ``k`` buckets of ``b`` bytes over ``p`` workers."""
    if p < 1:
        raise ValueError("p must be at least 1")
    return k * (alpha * (p - 1) + 2.0 * b * (p - 1) / (p * bandwidth))


def t_comm_refined(k: int, b: float, b_hat: float, p: int, bandwidth: float, alpha: float) -> float:
    """Variant that charges the last bucket at its real size ``b_hat``."""
    if k == 0:
        return 0.0
    return t_comm(k - 1, b, p, bandwidth, alpha) + t_comm(1, b_hat, p, bandwidth, alpha)


def iterations(n: int, batch: int) -> int:
    if batch < 1:
        raise ValueError("batch must be at least 1")
    return -(-n // batch)


def epoch_time(n: int, batch: int, t_compute: float, t_communicate: float) -> float:
    return iterations(n, batch) * max(t_compute, t_communicate)


def memory_required(active_layers: int, per_worker_batch: int, profile: ModelProfile) -> float:
    if not 0 <= active_layers <= profile.num_layers:
        raise ValueError("active_layers out of range")
    return (profile.weight_bytes + active_layers * profile.grad_bytes_per_layer
            + per_worker_batch * (profile.base_act_bytes + active_layers * profile.act_bytes_per_layer))


def max_batch(boundary: int, memory: float, profile: ModelProfile) -> int:
    """Largest per-worker batch that fits in ``memory`` with ``boundary`` layers frozen."""
    active = profile.num_layers - boundary
    per_sample = profile.base_act_bytes + active * profile.act_bytes_per_layer
    room = memory - memory_required(active, 0, profile)
    if per_sample <= 0:
        return 1 << 62 if room >= 0 else 0
    if room < 0:
        return 0
    b = int(room // per_sample)
    # guard float rounding at the edge
    while b > 0 and memory_required(active, b, profile) > memory:
        b -= 1
    while memory_required(active, b + 1, profile) <= memory:
        b += 1
    return b


@dataclass(frozen=True)
class PackingPlan:
    mode: str
    boundary: int
    workers: int
    per_worker_batch: int
    total_batch: int
    iterations: int
    t_comp: float
    t_comm: float
    t_iter: float
    epoch_time: float
    epoch_cost: float

    def as_row(self) -> dict:
        return {"mode": self.mode, "boundary": self.boundary, "p": self.workers,
                "batch": self.total_batch, "per_worker": self.per_worker_batch,
                "iters": self.iterations, "t_iter": self.t_iter,
                "t_epoch": self.epoch_time, "cost": self.epoch_cost}


@dataclass(frozen=True)
class Scenario:
    """Everything a planner needs besides the boundary."""

    cluster: ClusterConfig
    profile: ModelProfile
    dataset_size: int
    initial_per_worker: int
    batch_cap: int | None = None
    refined_comm: bool = False
    boundaries: tuple[int, ...] = field(default_factory=tuple)

    @property
    def initial_total(self) -> int:
        return self.initial_per_worker * self.cluster.workers


def evaluate(scn: Scenario, mode: str, boundary: int, workers: int, per_worker: int,
             total: int) -> PackingPlan:
    """Cost out one (workers, per-worker batch) configuration."""
    prof, cl = scn.profile, scn.cluster
    k, b, b_hat = prof.buckets(boundary)
    if scn.refined_comm:
        comm = t_comm_refined(k, b, b_hat, workers, cl.bandwidth, cl.alpha)
    else:
        comm = t_comm(k, b, workers, cl.bandwidth, cl.alpha)
    comp = prof.t_comp(boundary, per_worker)
    iters = iterations(scn.dataset_size, total)
    t_iter = max(comp, comm)
    t_epoch = iters * t_iter
    return PackingPlan(mode, boundary, workers, per_worker, total, iters, comp, comm, t_iter,
                       t_epoch, t_epoch * workers * cl.cost_rate)


def plan_full(scn: Scenario, boundary: int = 0) -> PackingPlan:
    """Initial layout (all workers, initial per-worker batch) at ``boundary``."""
    p = scn.cluster.workers
    return evaluate(scn, "full", boundary, p, scn.initial_per_worker, scn.initial_total)


def _memory_batch(scn: Scenario, boundary: int) -> int:
    b_l = max_batch(boundary, scn.cluster.memory, scn.profile)
    if b_l < 1:
        raise InfeasibleError(f"no batch fits in worker memory with {boundary} layers frozen")
    return b_l


def plan_efficiency(scn: Scenario, boundary: int) -> PackingPlan:
    """Fewest-cost worker count that still carries the initial total batch.

    Starts from ``ceil(total / b_l)`` workers, where ``b_l`` is the memory
    limit per worker; larger counts are only taken when batch rounding makes
    them strictly cheaper.
    """
    if boundary == 0:
        return replace(plan_full(scn), mode="efficiency")
    total = scn.initial_total
    b_l = _memory_batch(scn, boundary)
    p_min = iterations(total, b_l)
    best = None
    for workers in range(p_min, max(p_min, scn.cluster.workers) + 1):
        plan = evaluate(scn, "efficiency", boundary, workers, iterations(total, workers), total)
        if best is None or plan.epoch_cost < best.epoch_cost:
            best = plan
    return best


def plan_performance(scn: Scenario, boundary: int) -> PackingPlan:
    """Keep all workers and pick the per-worker batch (up to the memory limit and
    the configured cap) with the shortest epoch, preferring larger batches on ties."""
    if boundary == 0:
        return replace(plan_full(scn), mode="performance")
    p = scn.cluster.workers
    b_l = _memory_batch(scn, boundary)
    upper = b_l
    if scn.batch_cap is not None:
        upper = min(upper, scn.batch_cap // p)
    upper = max(upper, scn.initial_per_worker)
    best = None
    for per_worker in range(scn.initial_per_worker, upper + 1):
        plan = evaluate(scn, "performance", boundary, p, per_worker, per_worker * p)
        if best is None or plan.epoch_time <= best.epoch_time:
            best = plan
    return best


@dataclass(frozen=True)
class Comparison:
    time_ratio: float  # efficiency epoch time / performance epoch time
    cost_ratio: float  # performance cost / efficiency cost
    fastest: str
    cheapest: str


def compare(efficiency: PackingPlan, performance: PackingPlan) -> Comparison:
    time_ratio = efficiency.epoch_time / performance.epoch_time
    cost_ratio = performance.epoch_cost / efficiency.epoch_cost
    fastest = efficiency.mode if efficiency.epoch_time < performance.epoch_time else performance.mode
    cheapest = performance.mode if performance.epoch_cost < efficiency.epoch_cost else efficiency.mode
    return Comparison(time_ratio, cost_ratio, fastest, cheapest)


def simulate(scn: Scenario) -> list[dict]:
    """Per-epoch rows: full fine-tuning (nothing frozen) next to both packing modes."""
    rows = []
    for epoch, boundary in enumerate(scn.boundaries):
        for plan in (plan_full(scn), plan_efficiency(scn, boundary),
                     plan_performance(scn, boundary)):
            rows.append({"epoch": epoch, **plan.as_row()})
    return rows
