import numpy as np
import pytest

from bnnsafe.sets import BoxSet, PolyhedronSet, UnboundedSetError, UnionSet, as_parts, box_complement, set_from_json


def test_box_validation():
    with pytest.raises(ValueError):
        BoxSet([1.0], [0.0])
    with pytest.raises(UnboundedSetError):
        BoxSet([0.0], [np.inf])


def test_box_contains_and_sample(rng):
    box = BoxSet([-1, 0], [1, 2])
    pts = box.sample(rng, 500)
    assert np.all(box.contains(pts))
    assert not box.contains([1.5, 1.0])
    assert box.contains([1.0 + 1e-9, 1.0], tol=1e-8)


def test_box_intersection():
    a = BoxSet([0, 0], [2, 2])
    both = a.intersect(BoxSet([1, 1], [3, 3]))
    assert np.array_equal(both.lower, [1, 1]) and np.array_equal(both.upper, [2, 2])
    assert a.intersect(BoxSet([3, 3], [4, 4])) is None


def test_box_complement_membership():
    comp = box_complement([-1.2, -1.2], [1.2, 1.2])
    assert len(comp.parts) == 4
    assert comp.contains([1.2, 0.0]) and comp.contains([0.0, -1.3])
    assert not comp.contains([1.19, -1.19])


def test_polyhedron_bounding_box():
    tri = PolyhedronSet([[-1, 0], [0, -1], [1, 1]], [0, 0, 1])
    box = tri.bounding_box()
    assert np.allclose(box.lower, [0, 0]) and np.allclose(box.upper, [1, 1])
    assert PolyhedronSet([[1, 0]], [0]).bounding_box(BoxSet([1, 1], [2, 2])) is None
    with pytest.raises(UnboundedSetError):
        PolyhedronSet([[1, 0]], [0]).bounding_box()


def test_union_sampling_within_box(rng):
    comp = box_complement([-1.0], [1.0])
    pts = comp.sample(rng, 200, within=BoxSet([-1.5], [1.5]))
    assert pts.shape == (200, 1)
    assert np.all(np.abs(pts) >= 1.0 - 1e-12) and np.all(np.abs(pts) <= 1.5)


def test_json_round_trip():
    for s in (BoxSet([0, 1], [2, 3]), PolyhedronSet([[1, 2]], [3]), box_complement([-1, -1], [1, 1])):
        back = set_from_json(s.to_json())
        assert len(as_parts(back)) == len(as_parts(s))
        for p, q in zip(as_parts(back), as_parts(s)):
            assert np.array_equal(p.A, q.A) and np.array_equal(p.b, q.b)
    assert isinstance(set_from_json({"type": "box_complement", "lower": [-1], "upper": [1]}), UnionSet)
