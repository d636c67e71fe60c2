import numpy as np
import pytest

from layerfreeze import nncore


def random_model(rng, in_dim, widths, num_classes, activation="relu", scale=1.0):
    model = nncore.init_model(rng, in_dim, widths, num_classes, activation)
    for layer in model.layers + [model.head]:
        layer.weights *= scale
        layer.bias[:] = 0.1 * rng.standard_normal(layer.bias.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_scenario(rng):
    """One feasible scenario drawn from a fixed box (shared by the planner
    property tests and the acceptance suite)."""
    from layerfreeze import distsim

    L = int(rng.integers(4, 25))
    p = int(rng.integers(2, 65))
    b0 = int(rng.integers(1, 9))
    grad = float(rng.uniform(1e6, 5e7))
    act = float(rng.uniform(1e6, 2e8))
    base = float(rng.uniform(0, 1e8))
    weights = float(rng.uniform(1e7, 1e9))
    profile = distsim.ModelProfile(
        num_layers=L, bucket_bytes=float(rng.uniform(1e6, 5e7)), grad_bytes_per_layer=grad,
        head_grad_bytes=float(rng.uniform(0, grad)), weight_bytes=weights,
        act_bytes_per_layer=act, base_act_bytes=base,
        tcomp_fixed=float(rng.uniform(0, 0.05)), tcomp_active_layer=float(rng.uniform(1e-5, 2e-3)),
        tcomp_frozen_layer=0.0)
    profile = distsim.replace(profile, tcomp_frozen_layer=float(rng.uniform(0, profile.tcomp_active_layer)))
    need = distsim.memory_required(L, b0, profile)
    cluster = distsim.ClusterConfig(workers=p, bandwidth=float(10 ** rng.uniform(8, 10.5)),
                                    alpha=float(10 ** rng.uniform(-5, -2)),
                                    cost_rate=float(rng.uniform(0.5, 2)),
                                    memory=need * float(rng.uniform(1.0, 4.0)))
    scn = distsim.Scenario(cluster, profile, int(rng.integers(10_000, 200_001)), b0)
    boundary = int(rng.integers(1, L))
    return scn, boundary


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
