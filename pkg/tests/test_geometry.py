import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frwmw.geometry import (
    GENERAL,
    STRATIFIED,
    UNIFORM,
    Box,
    StructureError,
    StructureSyntaxError,
    build_grid,
    conductor_at,
    max_free_cube,
    parse_structure,
    permittivity_at,
)

from conftest import doc

WORLD = ((-1000, -1000, -1000), (1000, 1000, 1000))


def test_parse_single_plate():
    s = parse_structure(doc([((0, 0, 0), (100, 100, 10))], background=1.0))
    assert len(s.conductors) == 1
    assert s.background_eps_r == 1.0
    assert s.master_id == 1


def test_overlapping_dielectrics_later_wins():
    s = parse_structure(doc([((0, 0, 0), (10, 10, 10))],
                            [((20, 20, 20), (60, 60, 60), 3.9), ((40, 40, 40), (80, 80, 80), 7.0)], world=WORLD))
    assert permittivity_at(s, (50, 50, 50)) == 7.0
    assert permittivity_at(s, (30, 30, 30)) == 3.9
    assert permittivity_at(s, (500, 500, 500)) == 1.0


def test_inverted_box_is_rejected():
    with pytest.raises(StructureError, match="lo < hi"):
        parse_structure(doc([((10, 0, 0), (0, 10, 10))]))


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d.update(conductors=[]), "non-empty"),
    (lambda d: d["dielectrics"].append({"lo": [0, 0, 0], "hi": [1, 1, 1], "eps": 0}), "> 0"),
    (lambda d: d["conductors"].append(dict(d["conductors"][0])), "duplicate"),
    (lambda d: d.update(world={"lo": [0, 0, 0], "hi": [5, 5, 5]}), "outside world"),
    (lambda d: d.update(units="um"), "units"),
    (lambda d: d.update(master=9), "master"),
])
def test_validation_errors(mutate, message):
    d = json.loads(doc([((0, 0, 0), (10, 10, 10))]))
    mutate(d)
    with pytest.raises(StructureError, match=message):
        parse_structure(json.dumps(d, indent=1))


def test_syntax_error_reports_position():
    with pytest.raises(StructureSyntaxError) as e:
        parse_structure('{\n  "units": "nm",\n  "conductors": [,]\n}')
    assert (e.value.line, e.value.column) == (3, 18)


def test_validation_error_points_at_offending_object():
    text = '{\n "units": "nm",\n "conductors": [\n  {"id": 1, "lo": [5, 0, 0], "hi": [0, 1, 1]}\n ],\n "master": 1\n}'
    with pytest.raises(StructureError) as e:
        parse_structure(text)
    assert e.value.line == 4 and e.value.path == "conductors[0]"


def test_auto_world_is_inflated_bounding_box():
    s = parse_structure(doc([((0, 0, 0), (100, 100, 10))]))
    assert s.world.lo == (-200.0, -200.0, -245.0)
    assert s.world.hi == (300.0, 300.0, 255.0)


def test_permittivity_outside_world_is_an_error():
    s = parse_structure(doc([((0, 0, 0), (10, 10, 10))], world=WORLD))
    with pytest.raises(ValueError):
        permittivity_at(s, (5000, 0, 0))


def test_conductor_at():
    s = parse_structure(doc([((0, 0, 0), (10, 10, 10))], world=WORLD))
    assert conductor_at(s, (10, 5, 5), 0.0) == 1
    assert conductor_at(s, (5, 5, 5), 0.0) == 1
    assert conductor_at(s, (10.2, 5, 5), 0.1) is None
    with pytest.raises(ValueError):
        conductor_at(s, (0, 0, 0), -1)


def test_max_free_cube_examples():
    s = parse_structure(doc([((0, 0, 0), (1000, 1000, 1000))], world=((-1e5,) * 3, (1e5,) * 3)))
    assert max_free_cube(s, (2000, 500, 500)) == (1000.0, 1)
    s = parse_structure(doc([((0, 0, 0), (100, 100, 10)), ((0, 0, 210), (100, 100, 220))], world=WORLD))
    assert max_free_cube(s, (50, 50, 110))[0] == pytest.approx(100.0)
    s = parse_structure(doc([((0, 0, 0), (10, 10, 10))], world=((-300, -300, -300), (300, 300, 300))))
    w, near = max_free_cube(s, (250, 0, 5))
    assert w == pytest.approx(50.0) and near is None
    with pytest.raises(ValueError, match="inside conductor"):
        max_free_cube(s, (5, 5, 5))


boxes = st.tuples(
    st.tuples(*[st.integers(-50, 40)] * 3), st.tuples(*[st.integers(1, 20)] * 3)
).map(lambda t: (t[0], tuple(a + b for a, b in zip(t[0], t[1]))))


@settings(max_examples=60, deadline=None)
@given(st.lists(boxes, min_size=1, max_size=4), st.tuples(*[st.floats(-80, 80)] * 3))
def test_max_free_cube_matches_brute_force(cs, p):
    s = parse_structure(doc(cs, world=((-100,) * 3, (100,) * 3)))
    if conductor_at(s, p) is not None:
        return
    # brute force: Chebyshev distance as the max over axes of the gap to each box face pair
    best = min(min(p[k] + 100, 100 - p[k]) for k in range(3))
    for lo, hi in cs:
        d = max(max(lo[k] - p[k], p[k] - hi[k], 0.0) for k in range(3))
        best = min(best, d)
    if best <= 0:
        return
    w, _ = max_free_cube(s, p)
    assert w == pytest.approx(best, abs=1e-9)


def test_build_grid_uniform_stratified_general():
    s = parse_structure(doc([((0, 0, 0), (10, 10, 10))],
                            [((-1000, -1000, 100), (1000, 1000, 1000), 3.9), ((200, 200, -50), (220, 220, -30), 22.0)],
                            world=WORLD))
    g = build_grid(s, ((500, 500, -500), 40), 4)
    assert g.tag.kind == UNIFORM and np.all(g.eps == 1.0) and g.eps.size == 64
    g = build_grid(s, ((500, 500, 100), 40), 8)
    assert g.tag.kind == STRATIFIED and g.tag.axis == 2
    assert sorted(set(g.eps.ravel())) == [1.0, 3.9]
    g = build_grid(s, ((230, 230, -20), 40), 8)
    assert g.tag.kind == GENERAL
    with pytest.raises(ValueError, match="conductor"):
        build_grid(s, ((5, 5, 20), 15), 4)
    g = build_grid(s, ((5, 5, 20), 15), 6, allow_conductors=True)
    assert np.any(g.conductor_mask == 1) and np.any(g.conductor_mask == -1)


def test_voxel_eps_is_center_sample():
    s = parse_structure(doc([((0, 0, 0), (10, 10, 10))], [((100, 100, 100), (133, 200, 200), 5.0)], world=WORLD))
    g = build_grid(s, ((150, 150, 150), 50), 10)
    centers = 100 + 10 * (np.arange(10) + 0.5)
    for i, x in enumerate(centers):
        assert g.eps[i, 0, 0] == (5.0 if x < 133 else 1.0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(boxes, st.sampled_from([2.0, 3.9, 7.0, 22.0])), min_size=1, max_size=4),
       st.integers(2, 9), st.tuples(*[st.integers(-40, 40)] * 3))
def test_grid_matches_pointwise_permittivity(ds, n, c):
    diel = [(lo, hi, e) for (lo, hi), e in ds]
    s = parse_structure(doc([((500, 500, 500), (510, 510, 510))], diel, world=WORLD))
    g = build_grid(s, (c, 37.5), n)
    pitch = 75.0 / n
    for i, j, k in itertools.product(range(n), repeat=3):
        p = np.array(c) - 37.5 + pitch * (np.array([i, j, k]) + 0.5)
        assert g.eps[i, j, k] == permittivity_at(s, p)


def test_classification_ignores_box_order_for_same_field():
    a = parse_structure(doc([((500, 500, 500), (510, 510, 510))],
                            [((0, 0, 0), (50, 50, 25), 3.9), ((0, 0, 25), (50, 50, 50), 7.0)], world=WORLD))
    b = parse_structure(doc([((500, 500, 500), (510, 510, 510))],
                            [((0, 0, 25), (50, 50, 50), 7.0), ((0, 0, 0), (50, 50, 25), 3.9)], world=WORLD))
    ga, gb = build_grid(a, ((25, 25, 25), 25), 8), build_grid(b, ((25, 25, 25), 25), 8)
    assert ga.tag == gb.tag and np.array_equal(ga.eps, gb.eps)


def test_translation_invariance():
    s = parse_structure(doc([((0, 0, 0), (10, 10, 10))], [((20, 0, 0), (40, 30, 30), 4.0)], world=WORLD))
    t = (64.0, -128.0, 32.0)
    g = build_grid(s, ((30, 10, 10), 16), 8)
    h = build_grid(s.translate(t), ((94, -118, 42), 16), 8)
    assert g.tag == h.tag and np.array_equal(g.eps, h.eps)


def test_box_helpers():
    b = Box((0, 0, 0), (1, 2, 3))
    assert b.size == (1, 2, 3) and b.center == (0.5, 1, 1.5)
    assert b.intersect(Box((2, 2, 2), (3, 3, 3))) is None
    with pytest.raises(ValueError):
        Box((0, 0, float("nan")), (1, 1, 1))
