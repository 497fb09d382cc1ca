import numpy as np

from frwmw.rng import Stream, stream_key


def test_streams_are_reproducible_and_distinct():
    a = Stream.for_walk(7, 3).random(1000)
    b = Stream.for_walk(7, 3).random(1000)
    c = Stream.for_walk(7, 4).random(1000)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_uniform_range_and_moments():
    u = Stream.for_walk(1, 0).random(200_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 4 * np.sqrt(1 / 12 / u.size)
    assert abs(u.var() - 1 / 12) < 2e-3


def test_any_draw_is_a_function_of_its_position():
    s = Stream.for_walk(11, 5)
    head = s.random(10)
    t = Stream(s.key, 10)
    assert t.random() == s.random()
    assert np.array_equal(Stream(s.key, 0).random(10), head)


def test_keys_depend_on_seed_and_index():
    keys = {int(stream_key(np.uint64(s), np.uint64(i))) for s in range(20) for i in range(50)}
    assert len(keys) == 1000
