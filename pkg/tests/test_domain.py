import numpy as np
import pytest
from hypothesis import given, strategies as st

from chainexit.domain import Domain, ball, box, interval

coords = st.floats(-5, 5, allow_nan=False)
domains = st.one_of(
    st.tuples(coords, coords, st.floats(0.1, 3), st.floats(0.1, 3)).map(
        lambda v: box([v[0] - v[2], v[1] - v[3]], [v[0] + v[2], v[1] + v[3]])),
    st.tuples(coords, coords, st.floats(0.1, 3)).map(lambda v: ball([v[0], v[1]], v[2])),
)


@given(domains, coords, coords)
def test_projection_lands_on_boundary_with_unit_normal(dom, x, y):
    p = np.array([x, y])
    b = dom.project(p)
    assert abs(dom.signed_distance(b)) <= 1e-9
    assert np.linalg.norm(dom.normal(p)) == pytest.approx(1.0)


@given(domains, st.floats(0.01, 0.99))
def test_sign_convention(dom, frac):
    c = np.array(dom.a) if dom.kind == "ball" else (np.array(dom.a) + np.array(dom.b)) / 2
    edge = dom.project(c + np.array([1.0, 0.3]))
    inside = c + frac * (edge - c)
    outside = c + (1 + frac) * (edge - c)
    assert dom.signed_distance(inside) < 0
    assert dom.signed_distance(outside) > 0


@given(domains, st.floats(1.01, 3), st.floats(0, 2 * np.pi), st.floats(0, 0.99))
def test_enlarged_domain_contains_original(dom, factor, angle, frac):
    # interior points along a ray from the centre, which sees every boundary point
    c = np.array(dom.a) if dom.kind == "ball" else (np.array(dom.a) + np.array(dom.b)) / 2
    edge = dom.project(c + 10 * np.array([np.cos(angle), np.sin(angle)]))
    p = c + frac * (edge - c)
    assert dom.signed_distance(p) < 0
    assert dom.scaled(factor).signed_distance(p) < 0


def test_interval_normals():
    d = interval(-1, 1)
    assert d.normal(np.array([1.0]))[0] == 1.0
    assert d.normal(np.array([-1.2]))[0] == -1.0
    assert d.signed_distance(np.array([0.25]))[()] == -0.75


def test_corner_uses_axis_of_largest_penetration():
    d = box([0, 0], [1, 1])
    assert d.normal(np.array([1.3, 1.1])).tolist() == [1.0, 0.0]
    assert d.normal(np.array([1.1, 1.3])).tolist() == [0.0, 1.0]


def test_json_round_trip_and_validation():
    for d in (box([-1, 0], [1, 2]), ball([0, 1], 2.0)):
        assert Domain.from_json(d.to_json()) == d
    with pytest.raises(ValueError):
        box([1], [0])
    with pytest.raises(ValueError):
        ball([0], -1)
