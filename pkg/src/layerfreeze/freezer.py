"""Online layer freezing driven by the gradient-norm test.

Per evaluation interval, each active layer's gradients (weights and bias,
flattened) are summed into one vector.  At the next interval boundary the
relative change of that vector's L2 norm,

    eta_l = | |prev_l| - |cur_l| | / |prev_l|

is computed for every active layer.  Scanning active layers from the
bottom, a layer is frozen while its eta is strictly below the N-th
percentile of the active etas; the scan stops at the first layer that
fails.  Frozen layers therefore always form a prefix, and the boundary only
moves forward.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .nncore import GradientSet

log = logging.getLogger(__name__)

PERCENTILE_METHODS = {"linear": "linear", "nearest": "inverted_cdf"}


def eta(norm_prev: float, norm_cur: float) -> float:
    """Relative change of an accumulated-gradient norm; 0 when the previous norm is 0."""
    if norm_prev == 0.0:
        return 0.0
    return abs(norm_prev - norm_cur) / norm_prev


def percentile_threshold(etas, percentile: float, method: str = "linear") -> float:
    """N-th percentile of ``etas``.

    ``linear`` interpolates between order statistics (numpy's default);
    ``nearest`` is the nearest-rank rule (smallest value with at least N% of
    the sample at or below it).
    """
    if method not in PERCENTILE_METHODS:
        raise ValueError(f"unknown percentile method {method!r}")
    return float(np.percentile(np.asarray(etas, dtype=np.float64), percentile,
                               method=PERCENTILE_METHODS[method]))


@dataclass(frozen=True)
class FreezeState:
    num_layers: int
    frozen_boundary: int = 0
    percentile: float = 50.0
    method: str = "linear"
    history: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if not 0.0 < self.percentile < 100.0:
            raise ValueError("percentile must lie strictly between 0 and 100")
        if not 0 <= self.frozen_boundary <= self.num_layers:
            raise ValueError("frozen_boundary out of range")

    @property
    def active_layers(self) -> range:
        return range(self.frozen_boundary, self.num_layers)


def decide(state: FreezeState, etas, interval: int | None = None) -> FreezeState:
    """Advance the frozen boundary over the prefix of active layers whose eta
    is strictly below the percentile threshold."""
    etas = [float(e) for e in etas]
    if not etas:
        raise ValueError("decide needs at least one eta")
    if len(etas) != len(state.active_layers):
        raise ValueError(f"got {len(etas)} etas for {len(state.active_layers)} active layers")
    boundary = state.frozen_boundary
    if len(etas) >= 2:
        threshold = percentile_threshold(etas, state.percentile, state.method)
        for e in etas:
            if e < threshold:
                boundary += 1
            else:
                break
        # the last layer is never frozen automatically
        boundary = min(boundary, state.num_layers - 1)
    history = state.history
    if interval is not None:
        history = history + ((interval, boundary),)
    return replace(state, frozen_boundary=boundary, history=history)


def flatten_layer_grad(dw: np.ndarray, db: np.ndarray, include_bias: bool = True) -> np.ndarray:
    if include_bias:
        return np.concatenate([dw.ravel(), db.ravel()])
    return dw.ravel().copy()


@dataclass
class GradWindow:
    """Per-interval gradient sums for the active layers."""

    interval: int = 0
    accumulated: dict[int, np.ndarray] = field(default_factory=dict)
    previous_norms: dict[int, float] = field(default_factory=dict)
    include_bias: bool = True

    def norms(self) -> dict[int, float]:
        return {j: float(np.linalg.norm(v)) for j, v in self.accumulated.items()}


def accumulate(window: GradWindow, grads: GradientSet, active=None) -> GradWindow:
    """Add one step's gradients into the window (in place; the window is returned)."""
    layers = grads.layer_indices()
    if active is not None and layers != list(active):
        raise ValueError(f"gradients cover layers {layers}, expected {list(active)}")
    if window.accumulated and layers != sorted(window.accumulated):
        raise ValueError(
            f"gradients cover layers {layers}, window holds {sorted(window.accumulated)}"
        )
    for j in layers:
        flat = flatten_layer_grad(*grads.layers[j], include_bias=window.include_bias)
        if j in window.accumulated:
            window.accumulated[j] += flat
        else:
            window.accumulated[j] = flat
    return window


def interval_tick(state: FreezeState, window: GradWindow) -> tuple[FreezeState, GradWindow]:
    """Close the current interval: compare norms against the previous interval,
    decide, and start a fresh window over the remaining active layers."""
    T = window.interval + 1
    active = list(state.active_layers)
    cur = {j: float(np.linalg.norm(window.accumulated[j])) if j in window.accumulated else 0.0
           for j in active}
    if window.previous_norms:
        etas = [eta(window.previous_norms.get(j, 0.0), cur[j]) for j in active]
        new_state = decide(state, etas, interval=T)
        if new_state.frozen_boundary != state.frozen_boundary:
            log.info("interval %d: froze layers %d..%d", T, state.frozen_boundary,
                     new_state.frozen_boundary - 1)
    else:
        new_state = replace(state, history=state.history + ((T, state.frozen_boundary),))
    remaining = new_state.active_layers
    new_window = GradWindow(interval=T, previous_norms={j: cur[j] for j in remaining},
                            include_bias=window.include_bias)
    return new_state, new_window


class Freezer:
    """Stateful wrapper the training loop talks to."""

    def __init__(self, num_layers: int, percentile: float = 50.0, method: str = "linear",
                 include_bias: bool = True):
        self.state = FreezeState(num_layers, percentile=percentile, method=method)
        self.window = GradWindow(include_bias=include_bias)

    @property
    def frozen_boundary(self) -> int:
        return self.state.frozen_boundary

    def accumulate(self, grads: GradientSet) -> None:
        accumulate(self.window, grads, active=self.state.active_layers)

    def tick(self) -> int:
        self.state, self.window = interval_tick(self.state, self.window)
        return self.state.frozen_boundary
