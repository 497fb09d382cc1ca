import numpy as np
import pytest
import scipy.sparse as sp

from frwmw.geometry import DielectricGrid
from frwmw.oracle import exact_absorption_row, exact_expected_steps, random_voxel_grid
from frwmw.sgf import (
    DiscreteSGF,
    ProfileKey,
    SGFCache,
    absorption_rows,
    assemble_system,
    cached_stratified_sgf,
    expected_steps,
    panel_layout,
    row_sum_check,
    sample_panel,
    solve_sgf,
)
from frwmw.suites import symmetry_error


def uniform(n, eps=1.0):
    return DielectricGrid(np.full((n, n, n), eps))


def test_n1_system():
    sys = assemble_system(uniform(1, 3.0))
    assert sys.a_ii.toarray().tolist() == [[6.0]]
    assert sys.a_ib.toarray().tolist() == [[1.0] * 6]
    assert np.allclose(solve_sgf(sys).probs, 1 / 6)
    assert expected_steps(sys) == pytest.approx(1.0)


def test_n2_uniform_diagonal():
    sys = assemble_system(uniform(2))
    assert np.allclose(sys.a_ii.diagonal(), 4.5)
    off = sys.a_ii.toarray() - np.diag(sys.a_ii.diagonal())
    assert np.allclose(off[off != 0], -0.5)
    assert np.allclose(np.asarray(sys.a_ib.sum(axis=1)).ravel(), 3.0)


def test_interface_coefficient():
    eps = np.ones((3, 3, 3))
    eps[2, 1, 1] = 3.0
    sys = assemble_system(DielectricGrid(eps))
    c = sys.center_index
    row = sys.a_ii.getrow(c).toarray().ravel()
    assert row[c] == pytest.approx(5 * 0.5 + 0.75)
    assert sorted(row[row < 0]) == pytest.approx([-0.75] + [-0.5] * 5)


@pytest.mark.parametrize("seed", range(4))
def test_row_invariants(seed):
    sys = assemble_system(random_voxel_grid(5, seed))
    a_ii = sys.a_ii.tocsr()
    diag = a_ii.diagonal()
    off = np.asarray(abs(a_ii - sp.diags(diag)).sum(axis=1)).ravel()
    assert np.all(diag > 0)
    assert np.allclose(diag, off + np.asarray(sys.a_ib.sum(axis=1)).ravel())
    assert np.all(np.diff(a_ii.indptr) + np.diff(sys.a_ib.tocsr().indptr) == 7)


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_dense_vs_sparse(n):
    for seed in range(3):
        grid = random_voxel_grid(n, 10 * n + seed)
        sys = assemble_system(grid)
        for method in ("cg", "direct"):
            sgf = solve_sgf(sys, method=method)
            assert np.abs(sgf.probs - exact_absorption_row(grid)).max() <= 1e-8
        assert expected_steps(sys) == pytest.approx(exact_expected_steps(grid), abs=1e-8)


def test_n2_uniform_matches_dense():
    assert np.abs(solve_sgf(assemble_system(uniform(2))).probs - exact_absorption_row(uniform(2))).max() <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_normalization_and_kernel_zero_sum(seed):
    sgf = solve_sgf(assemble_system(random_voxel_grid(6, seed)))
    assert abs(sgf.probs.sum() - 1) <= 1e-9 and sgf.probs.min() >= 0
    assert abs(sgf.cdf[-1] - 1) <= 1e-9 and np.all(np.diff(sgf.cdf) >= 0)
    assert np.abs(sgf.grad_kernels.sum(axis=1)).max() <= 1e-9


def test_row_sum_consistency():
    assert row_sum_check(assemble_system(random_voxel_grid(6, 3))) <= 1e-8


@pytest.mark.parametrize("n", [4, 5, 8])
def test_linear_field_exactness(n):
    eps = 2.5
    grid = DielectricGrid(np.full((n, n, n), eps), np.zeros(3), 0.7)
    sys = assemble_system(grid)
    d = np.array([0.3, -1.2, 2.0])
    phi_b = (sys.panel_points * grid.pitch) @ d + 4.0
    # interior potentials
    rows = absorption_rows(sys, np.arange(sys.interior_count))
    ijk = np.stack(np.unravel_index(np.arange(n ** 3), (n,) * 3), axis=1) - n // 2
    assert np.abs(rows @ phi_b - ((ijk * grid.pitch) @ d + 4.0)).max() <= 1e-8
    sgf = solve_sgf(sys)
    assert np.allclose(sgf.grad_kernels @ phi_b, eps * d, atol=1e-6)


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_uniform_symmetry(n):
    assert symmetry_error(solve_sgf(assemble_system(uniform(n))).probs, n) <= 1e-8


@pytest.mark.parametrize("lam", [8.0, 13.7])
def test_global_scale_invariance(lam):
    g = random_voxel_grid(5, 7)
    a = assemble_system(g)
    b = assemble_system(g.scaled(lam))
    if lam == 8.0:
        # power-of-two scaling is exact in floating point
        assert np.array_equal(a.a_ii.toarray(), b.a_ii.toarray())
    else:
        assert np.allclose(a.a_ii.toarray(), b.a_ii.toarray(), rtol=1e-15, atol=0)
    sa, sb = solve_sgf(a), solve_sgf(b)
    assert np.abs(sa.probs - sb.probs).max() <= 1e-8
    # kernels are eps * gradient, so they scale with eps
    assert np.abs(sa.grad_kernels * lam - sb.grad_kernels).max() <= 1e-8 * np.abs(sb.grad_kernels).max()


def test_sample_panel_inversion():
    sgf = DiscreteSGF.from_probs([0.2, 0.3, 0.5], 1, panel_points=np.zeros((3, 3)))
    assert sample_panel(sgf, 0.6) == 2
    assert sample_panel(sgf, 0.0) == 0
    assert sample_panel(sgf, 0.2) == 1


def test_sample_panel_frequencies():
    sgf = solve_sgf(assemble_system(random_voxel_grid(4, 1)))
    u = np.random.default_rng(0).random(1_000_000)
    idx = np.minimum(np.searchsorted(sgf.cdf, u, side="right"), sgf.panel_count - 1)
    emp = np.bincount(idx, minlength=sgf.panel_count) / u.size
    assert 0.5 * np.abs(emp - sgf.probs).sum() <= 0.01


def test_expected_steps_uniform_24():
    assert expected_steps(assemble_system(uniform(24))) / 24 ** 2 == pytest.approx(0.3373, rel=0.05)


def test_panel_layout_covers_surface():
    pts = panel_layout(4)
    assert pts.shape == (96, 3)
    assert len({tuple(p) for p in pts}) == 96


def test_cache_hits_and_identity():
    cache = SGFCache(6)
    key = ProfileKey.from_layers(6, 2, [1, 1, 1, 4, 4, 4])
    a = cached_stratified_sgf(cache, key)
    b = cached_stratified_sgf(cache, key)
    assert a is b
    assert (cache.hits, cache.misses, cache.solves) == (1, 1, 1)


def test_cache_scale_and_agreement_with_fresh_solve():
    cache = SGFCache(6)
    layers = np.array([1, 1, 2, 2, 7, 7.0])
    a = cache.get(ProfileKey.from_layers(6, 0, layers))
    b = cache.get(ProfileKey.from_layers(6, 0, 3 * layers))
    assert np.abs(a.probs - b.probs).max() <= 1e-12
    fresh = solve_sgf(assemble_system(DielectricGrid(np.broadcast_to(layers[:, None, None], (6, 6, 6)).copy())))
    assert np.abs(a.probs - fresh.probs).max() <= 1e-8


def test_uniform_key_symmetry():
    sgf = SGFCache(5).get(ProfileKey.from_layers(5, 1, [3.9] * 5))
    assert symmetry_error(sgf.probs, 5) <= 1e-8


def test_cache_rejects_general_and_expanded():
    g = random_voxel_grid(4, 0)
    with pytest.raises(ValueError, match="MicroWalk"):
        ProfileKey.from_grid(g)
    with pytest.raises(ValueError):
        SGFCache(4).get(ProfileKey(4, 2, (1, 1, 1, 1), expanded=True))
    with pytest.raises(ValueError):
        SGFCache(4).get(ProfileKey.from_layers(5, 2, [1] * 5))


def test_lru_capacity():
    cache = SGFCache(4, capacity=2)
    keys = [ProfileKey.from_layers(4, 2, [1, 1, e, e]) for e in (2.0, 3.0, 5.0)]
    for k in keys:
        cache.get(k)
    assert len(cache) == 2 and keys[0] not in cache and keys[2] in cache
    assert cache.get(keys[2]).probs.sum() == pytest.approx(1)


def test_cache_persistence_roundtrip(tmp_path):
    cache = SGFCache(4)
    keys = [ProfileKey.from_layers(4, a, [1, 2, 3, 4]) for a in range(3)]
    for k in keys:
        cache.get(k)
    path = tmp_path / "c.sgf"
    cache.save(path)
    assert path.read_bytes()[:4] == b"SGF1"
    loaded = SGFCache.load(path)
    for k in keys:
        assert np.array_equal(loaded.lookup(k).probs, cache.lookup(k).probs)
        assert np.array_equal(loaded.lookup(k).grad_kernels, cache.lookup(k).grad_kernels)
    assert loaded.solves == 3 and loaded.misses == 0


def test_cache_file_validation(tmp_path):
    bad = tmp_path / "bad.sgf"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="magic"):
        SGFCache.load(bad)
    cache = SGFCache(3)
    cache.get(ProfileKey.from_layers(3, 2, [1, 2, 3]))
    good = tmp_path / "good.sgf"
    cache.save(good)
    data = bytearray(good.read_bytes())
    off = 12 + 8 * (2 + 3)
    data[off:off + 8] = np.float64(0.9).tobytes()
    bad.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="normalization"):
        SGFCache.load(bad)


def test_masked_system_has_conductor_panels():
    mask = -np.ones((6, 6, 6), dtype=int)
    mask[4:, :, :] = 7
    grid = DielectricGrid(np.ones((6, 6, 6)), conductor_mask=mask)
    sys = assemble_system(grid)
    assert sys.interior_count == 4 * 36
    assert set(sys.conductor_panels.values()) == {7}
    sgf = solve_sgf(sys)
    assert abs(sgf.probs.sum() - 1) <= 1e-9
    assert np.abs(sgf.probs - exact_absorption_row(grid)).max() <= 1e-8
    with pytest.raises(ValueError, match="no interior"):
        assemble_system(DielectricGrid(np.ones((2, 2, 2)), conductor_mask=np.zeros((2, 2, 2), dtype=int)))
