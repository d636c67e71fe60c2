import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layerfreeze import nncore
from layerfreeze.freezer import (FreezeState, Freezer, GradWindow, accumulate, decide, eta,
                                 interval_tick, percentile_threshold)


def grads_for(layers, rng, scale=None):
    scale = scale or {}
    return nncore.GradientSet(
        layers[0], {j: (scale.get(j, 1.0) * rng.standard_normal((3, 2)),
                        scale.get(j, 1.0) * rng.standard_normal(3)) for j in layers}, None)


@pytest.mark.parametrize("prev,cur,want", [(10, 10, 0.0), (10, 5, 0.5), (4, 7, 0.75), (0, 3, 0.0)])
def test_eta_examples(prev, cur, want):
    assert eta(prev, cur) == want


def test_linear_percentile_of_four():
    assert percentile_threshold([0.1, 0.2, 0.3, 0.4], 50) == pytest.approx(0.25)
    assert percentile_threshold([0.1, 0.2, 0.3, 0.4], 50, "nearest") == pytest.approx(0.2)
    with pytest.raises(ValueError):
        percentile_threshold([1, 2], 50, "midpoint")


def test_decide_examples():
    s = FreezeState(4)
    assert decide(s, [0.1, 0.2, 0.3, 0.4]).frozen_boundary == 2
    assert decide(s, [0.9, 0.1, 0.1, 0.1]).frozen_boundary == 0
    assert decide(s, [0.3] * 4).frozen_boundary == 0
    with pytest.raises(ValueError):
        decide(s, [])
    with pytest.raises(ValueError):
        decide(s, [0.1, 0.2])


def test_decide_never_freezes_last_layer_and_skips_single_layer():
    s = FreezeState(3, frozen_boundary=1)
    assert decide(s, [0.0, 1.0]).frozen_boundary == 2
    s = FreezeState(3, frozen_boundary=2)
    assert decide(s, [0.0]).frozen_boundary == 2


def test_decide_records_history():
    s = decide(FreezeState(4), [0.1, 0.2, 0.3, 0.4], interval=2)
    s = decide(s, [0.5, 0.1], interval=3)
    assert s.history == ((2, 2), (3, 2))


def test_state_validation():
    with pytest.raises(ValueError):
        FreezeState(4, percentile=100)
    with pytest.raises(ValueError):
        FreezeState(4, frozen_boundary=5)


def test_accumulate_examples(rng):
    w = GradWindow()
    g = grads_for([0, 1], rng)
    accumulate(w, g)
    for j in (0, 1):
        assert np.array_equal(w.accumulated[j], np.concatenate([g.layers[j][0].ravel(), g.layers[j][1]]))
    neg = nncore.GradientSet(0, {j: (-dw, -db) for j, (dw, db) in g.layers.items()}, None)
    accumulate(w, neg)
    assert all(not v.any() for v in w.accumulated.values())


def test_accumulated_norm_matches_resummation(rng):
    w = GradWindow()
    stream = [grads_for([0, 1, 2], rng) for _ in range(3)]
    for g in stream:
        accumulate(w, g)
    for j in range(3):
        total = sum(np.concatenate([g.layers[j][0].ravel(), g.layers[j][1]]) for g in stream)
        assert w.norms()[j] == pytest.approx(np.sqrt((total**2).sum()), rel=1e-12)


def test_accumulate_rejects_layer_mismatch(rng):
    w = GradWindow()
    accumulate(w, grads_for([1, 2], rng))
    with pytest.raises(ValueError):
        accumulate(w, grads_for([2], rng))
    with pytest.raises(ValueError):
        accumulate(GradWindow(), grads_for([0, 1], rng), active=range(1, 3))


def test_bias_flag(rng):
    w = GradWindow(include_bias=False)
    g = grads_for([0, 1], rng)
    accumulate(w, g)
    assert w.accumulated[0].size == 6


def run_stream(num_layers, intervals, scale_fn, steps=4, seed=0):
    rng = np.random.default_rng(seed)
    f = Freezer(num_layers)
    boundaries = []
    for T in range(intervals):
        for _ in range(steps):
            active = list(f.state.active_layers)
            g = nncore.GradientSet(active[0], {j: (scale_fn(j, T) * np.ones((3, 2)),
                                                   scale_fn(j, T) * np.ones(3)) for j in active}, None)
            f.accumulate(g)
        boundaries.append(f.tick())
    return boundaries, f


def test_first_interval_never_freezes():
    b, _ = run_stream(4, 1, lambda j, T: 0.0 if j == 0 else 1.0)
    assert b == [0]


def test_identical_layers_never_freeze():
    b, _ = run_stream(5, 6, lambda j, T: 2.0 ** -T)
    assert b == [0] * 6


def test_stationary_bottom_layer_freezes_first():
    # layer 0 settles while the layers above keep shrinking 10x per interval
    b, f = run_stream(4, 4, lambda j, T: 1.0 if j == 0 else 10.0 ** -T)
    assert b[0] == 0 and b[1] >= 1
    assert [h[1] for h in f.state.history] == b


def test_shrinking_bottom_layer_is_not_quiescent():
    # a layer whose accumulated gradient shrinks 10x per interval has eta = 0.9;
    # against stationary layers (eta = 0) it is the least converged, so it stays
    b, _ = run_stream(4, 4, lambda j, T: 10.0 ** -T if j == 0 else 1.0)
    assert b == [0, 0, 0, 0]


def test_interval_tick_rolls_window(rng):
    state, w = FreezeState(3), GradWindow()
    accumulate(w, grads_for([0, 1, 2], rng))
    norms = w.norms()
    state, w = interval_tick(state, w)
    assert w.interval == 1 and w.accumulated == {} and w.previous_norms == norms
    assert state.history == ((1, 0),)


def test_freezer_window_drops_frozen_layers():
    rng = np.random.default_rng(3)
    f = Freezer(4)
    scales = [{0: 1, 1: 1, 2: 1, 3: 1}, {0: 1, 1: 1.01, 2: 3, 3: 5}]
    for sc in scales:
        f.accumulate(grads_for([0, 1, 2, 3], np.random.default_rng(0), sc))
        f.tick()
    assert f.frozen_boundary == 2
    assert sorted(f.window.previous_norms) == [2, 3]
    f.accumulate(grads_for([2, 3], rng))
    with pytest.raises(ValueError):
        f.accumulate(grads_for([1, 2, 3], rng))


etas_strategy = st.lists(st.floats(0, 10, allow_nan=False), min_size=2, max_size=12)


@settings(max_examples=300, deadline=None)
@given(etas_strategy, st.integers(0, 3))
def test_decide_is_prefix_and_monotone(etas, already):
    L = len(etas) + already
    s = FreezeState(L, frozen_boundary=already)
    out = decide(s, etas)
    assert already <= out.frozen_boundary <= L - 1
    thr = percentile_threshold(etas, 50)
    k = out.frozen_boundary - already
    assert all(e < thr for e in etas[:k])
    if out.frozen_boundary < L - 1:
        assert k == len(etas) or not etas[k] < thr


@settings(max_examples=200, deadline=None)
@given(etas_strategy, st.integers(-20, 20))
def test_decisions_are_scale_invariant(etas, k):
    c = 2.0**k  # exact scaling, so ties stay ties
    prev = np.linspace(1.0, 2.0, len(etas))
    cur = prev * (1 + np.asarray(etas))
    a = [eta(p, q) for p, q in zip(prev, cur)]
    b = [eta(c * p, c * q) for p, q in zip(prev, cur)]
    s = FreezeState(len(etas))
    assert decide(s, a).frozen_boundary == decide(s, b).frozen_boundary


def test_percentile_monotonicity_over_random_vectors():
    rng = np.random.default_rng(7)
    grid = np.linspace(1, 99, 33)
    for _ in range(1000):
        n = int(rng.integers(2, 16))
        etas = rng.exponential(size=n)
        for method in ("linear", "nearest"):
            counts = [decide(FreezeState(n, percentile=p, method=method), etas).frozen_boundary
                      for p in grid]
            assert counts == sorted(counts)
