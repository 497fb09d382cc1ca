import numpy as np
import pytest

from frwmw.geometry import DielectricGrid, grid_from_lattice, parse_structure
from frwmw.microwalk import (
    EXIT_CONDUCTOR,
    EXIT_PANEL,
    expanded_lattice,
    microwalk_e_transit,
    microwalk_transit,
    neighbor_weights,
    sample_exits,
)
from frwmw.oracle import compare_distribution, exact_absorption_row, random_block_grid, random_voxel_grid
from frwmw.rng import Stream
from frwmw.sgf import assemble_system, expected_steps, panel_layout

from conftest import doc


def test_neighbor_weights_uniform_and_boundary():
    assert np.allclose(neighbor_weights(DielectricGrid(np.ones((5, 5, 5))), (2, 2, 2)), 1 / 6)
    assert np.allclose(neighbor_weights(DielectricGrid(np.full((1, 1, 1), 4.0)), (0, 0, 0)), 1 / 6)


def test_neighbor_weights_high_k_neighbour():
    eps = np.ones((3, 3, 3))
    eps[2, 1, 1] = 3.0
    beta = neighbor_weights(DielectricGrid(eps), (1, 1, 1))
    assert beta[1] == pytest.approx(0.75 / 3.25)
    assert beta.sum() == pytest.approx(1.0, abs=1e-15)


def test_neighbor_weights_scale():
    g = random_voxel_grid(4, 3)
    for node in [(1, 1, 1), (0, 2, 3)]:
        a = neighbor_weights(g, node)
        assert np.array_equal(a, neighbor_weights(g.scaled(4.0), node))
        assert np.allclose(a, neighbor_weights(g.scaled(13.7), node), rtol=1e-15, atol=0)


def test_n1_exits_in_one_step():
    kinds, targets, steps = sample_exits(DielectricGrid(np.ones((1, 1, 1))), 60_000, seed=2)
    assert np.all(steps == 1) and np.all(kinds == EXIT_PANEL)
    freq = np.bincount(targets, minlength=6) / targets.size
    assert np.abs(freq - 1 / 6).max() < 4 * np.sqrt(1 / 6 * 5 / 6 / targets.size)


@pytest.mark.parametrize("maker, seed", [(random_voxel_grid, 1), (random_block_grid, 2)])
def test_exit_distribution_matches_exact_row(maker, seed):
    grid = maker(4, seed)
    exact = exact_absorption_row(grid)
    rep = compare_distribution(exact, lambda m, s: sample_exits(grid, m, seed=s)[1], 1_000_000, rng=seed)
    assert rep.tv_distance <= 0.01
    assert rep.p_value > 1e-3


def test_step_law_uniform_n8():
    grid = DielectricGrid(np.ones((8, 8, 8)))
    _, _, steps = sample_exits(grid, 100_000, seed=5)
    exact = expected_steps(assemble_system(grid))
    assert abs(steps.mean() - exact) <= 3 * steps.std(ddof=1) / np.sqrt(steps.size)


def test_step_law_random_grid():
    grid = random_voxel_grid(6, 9)
    _, _, steps = sample_exits(grid, 100_000, seed=6)
    exact = expected_steps(assemble_system(grid))
    assert abs(steps.mean() - exact) <= 3 * steps.std(ddof=1) / np.sqrt(steps.size)


def test_memoization_is_transparent():
    grid = random_voxel_grid(6, 4)
    a = sample_exits(grid, 5000, seed=3, memoize=True)
    b = sample_exits(grid, 5000, seed=3, memoize=False)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_general_scale_keeps_trajectories():
    grid = random_voxel_grid(6, 4)
    a = sample_exits(grid, 5000, seed=3)
    b = sample_exits(grid.scaled(13.7), 5000, seed=3)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_transit_object_matches_batch_sampler():
    grid = random_voxel_grid(5, 8)
    kinds, targets, steps = sample_exits(grid, 20, seed=11)
    for t in range(20):
        ex = microwalk_transit(grid, Stream.for_walk(11, t))
        assert ex.panel == targets[t] and ex.steps == steps[t]
        assert np.allclose(ex.point, grid.start_point + panel_layout(5)[ex.panel] * grid.pitch)


def test_step_cap_raises():
    with pytest.raises(RuntimeError, match="step cap"):
        sample_exits(DielectricGrid(np.ones((8, 8, 8))), 100, step_cap=3)
    with pytest.raises(ValueError):
        microwalk_transit(DielectricGrid(np.ones((2, 2, 2)), conductor_mask=np.array([[[0, -1]] * 2] * 2)), 0)


WORLD = ((-2000,) * 3, (2000,) * 3)


def half_conductor_scene():
    # conductor fills x >= 0 near the origin; the walk starts at x = -50
    return parse_structure(doc([((0, -500, -500), (500, 500, 500))], world=WORLD))


def test_expansion_one_without_conductors_is_plain_microwalk():
    s = parse_structure(doc([((1000, 1000, 1000), (1100, 1100, 1100))], world=WORLD))
    n = 6
    lo, h = expanded_lattice(s, (0, 0, 0), 30.0, 1.0, n)
    grid = grid_from_lattice(s, lo, h, n)
    for t in range(10):
        e = microwalk_e_transit(s, (0, 0, 0), 30.0, 1.0, n, Stream.for_walk(4, t))
        m = microwalk_transit(grid, Stream.for_walk(4, t))
        assert e.kind == "panel" and e.panel == m.panel and np.allclose(e.point, m.point)


def test_masked_half_cube_matches_absorption_row():
    s = half_conductor_scene()
    n = 5
    lo, h = expanded_lattice(s, (-50, 0, 0), 20.0, 5.0, n)
    grid = grid_from_lattice(s, lo, h, n, allow_conductors=True)
    assert np.any(grid.conductor_mask == 1)
    sys = assemble_system(grid)
    exact = exact_absorption_row(grid)
    owner = sys.panel_conductor()
    # bins: surface panels, then one bin for the conductor
    surf = 6 * n * n
    exact_bins = np.append(exact[:surf], exact[surf:].sum())
    assert np.all(owner[:surf] == -1) and np.all(owner[surf:] == 1)

    def draw(m, seed):
        kinds, targets, _ = sample_exits(grid, m, seed=seed)
        return np.where(kinds == EXIT_CONDUCTOR, surf, targets)

    rep = compare_distribution(exact_bins, draw, 200_000, rng=1)
    assert rep.tv_distance <= 0.01 * np.sqrt(1e6 / 2e5) and rep.p_value > 1e-3


def test_grounded_plate_absorbed_fraction():
    s = half_conductor_scene()
    n = 8
    lo, h = expanded_lattice(s, (-50, 0, 0), 20.0, 5.0, n)
    grid = grid_from_lattice(s, lo, h, n, allow_conductors=True)
    sys = assemble_system(grid)
    exact = exact_absorption_row(grid)
    mass = exact[sys.panel_conductor() == 1].sum()
    count = 100_000
    kinds, _, _ = sample_exits(grid, count, seed=9)
    frac = np.mean(kinds == EXIT_CONDUCTOR)
    assert abs(frac - mass) <= 3 * np.sqrt(mass * (1 - mass) / count)
    for t in range(200):
        e = microwalk_e_transit(s, (-50, 0, 0), 20.0, 5.0, n, Stream.for_walk(9, t))
        assert (e.kind == "conductor") == (kinds[t] == EXIT_CONDUCTOR)
        if e.kind == "conductor":
            # staircase face: within half a pitch of the true surface
            assert e.conductor_id == 1 and abs(e.point[0]) <= h / 2 + 1e-9


def test_engulfed_start_is_rejected():
    # a sheet thinner than a voxel, inside the start voxel, still claims it
    s = parse_structure(doc([((10, -500, -500), (11, 500, 500))], world=WORLD))
    with pytest.raises(ValueError, match="fall back"):
        microwalk_e_transit(s, (0, 0, 0), 10.0, 5.0, 3, 0)
    s = half_conductor_scene()
    with pytest.raises(ValueError):
        microwalk_e_transit(s, (-50, 0, 0), 20.0, 0.5, 4, 0)
