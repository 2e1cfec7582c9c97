import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from incdet.geometry import (
    Box,
    PixelBox,
    box_giou,
    box_iou,
    corner_to_center,
    center_to_corner,
    from_corner,
    giou,
    iou,
    pairwise_iou,
    to_corner,
)

coords = st.floats(0.05, 0.95)
sizes = st.floats(0.02, 0.5)


@st.composite
def boxes(draw):
    w, h = draw(sizes), draw(sizes)
    cx = draw(st.floats(w / 2, 1 - w / 2))
    cy = draw(st.floats(h / 2, 1 - h / 2))
    return Box(cx, cy, w, h)


def test_iou_identity():
    b = from_corner(0, 0, 1, 1)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    a = Box(0.25, 0.25, 0.5, 0.5)
    b = Box(0.75, 0.75, 0.5, 0.5)
    assert iou(a, b) == 0.0


def test_iou_partial_overlap():
    # corner boxes [0,0,1,1] and [0.5,0,1.5,1]: inter 0.5, union 1.5
    a = from_corner(0, 0, 1, 1)
    b = Box(1.0, 0.5, 1.0, 1.0)
    assert iou(a, b) == pytest.approx(1 / 3, abs=1e-12)


def test_giou_identity():
    assert giou(from_corner(0.1, 0.1, 0.8, 0.9), from_corner(0.1, 0.1, 0.8, 0.9)) == 1.0


def test_giou_disjoint_worked_value():
    # corner boxes [0,0,1,1] and [1,1,2,2] scaled by 1/2 into the unit square
    a = from_corner(0.0, 0.0, 0.5, 0.5)
    b = from_corner(0.5, 0.5, 1.0, 1.0)
    assert giou(a, b) == pytest.approx(-0.5, abs=1e-9)


def test_giou_zero_area_enclosing_flags_degenerate():
    a = Box(0.3, 0.3, 0.0, 0.0)
    with pytest.warns(UserWarning, match="zero-area enclosing"):
        assert giou(a, a) == 0.0


def test_iou_zero_union_is_zero():
    a = Box(0.3, 0.3, 0.0, 0.0)
    b = Box(0.7, 0.7, 0.0, 0.0)
    assert iou(a, b) == 0.0


@given(boxes(), boxes())
def test_symmetry(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)
    assert giou(a, b) == pytest.approx(giou(b, a), abs=1e-12)


@given(boxes(), boxes())
def test_giou_bounded_and_below_iou(a, b):
    g, i = giou(a, b), iou(a, b)
    assert -1 < g <= 1
    assert g <= i + 1e-12


@given(boxes())
def test_giou_self_is_one(b):
    assert giou(b, b) == pytest.approx(1.0, abs=1e-12)


@given(boxes())
def test_corner_round_trip(b):
    r = from_corner(*to_corner(b))
    for got, want in zip((r.cx, r.cy, r.w, r.h), (b.cx, b.cy, b.w, b.h)):
        assert abs(got - want) <= 1e-9


def test_corner_conversions_hand_cases():
    assert to_corner(Box(0.5, 0.5, 1, 1)) == (0, 0, 1, 1)
    assert to_corner(Box(0.5, 0.5, 0, 0)) == (0.5, 0.5, 0.5, 0.5)


def test_from_corner_rejects_inverted():
    with pytest.raises(ValueError):
        from_corner(0.6, 0.0, 0.4, 1.0)
    with pytest.raises(ValueError):
        from_corner(0.0, 0.9, 1.0, 0.2)


def test_box_validation():
    with pytest.raises(ValueError):
        Box(1.2, 0.5, 0.1, 0.1)
    with pytest.raises(ValueError):
        Box(0.5, 0.5, -0.1, 0.1)


def test_pixel_box_validation():
    with pytest.raises(ValueError):
        PixelBox(5, 5, 5, 10)
    with pytest.raises(ValueError):
        PixelBox(-1, 0, 4, 4)
    assert PixelBox(0, 0, 10, 10).to_box(10, 10) == Box(0.5, 0.5, 1.0, 1.0)


def test_tensor_corner_round_trip():
    t = torch.tensor([[0.5, 0.4, 0.2, 0.3], [0.1, 0.9, 0.05, 0.1]])
    assert torch.allclose(corner_to_center(center_to_corner(t)), t, atol=1e-9)


def test_pairwise_matches_elementwise():
    a = torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.6, 0.6, 0.3, 0.3]])
    b = torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.8, 0.2, 0.2, 0.1], [0.5, 0.5, 0.4, 0.4]])
    mat = pairwise_iou(a, b)
    for i in range(2):
        for j in range(3):
            assert float(mat[i, j]) == pytest.approx(float(box_iou(a[i], b[j])), abs=1e-12)


def _random_box_pair(rng):
    def one():
        w, h = rng.uniform(0.1, 0.5, size=2)
        cx = rng.uniform(w / 2 + 0.01, 0.99 - w / 2)
        cy = rng.uniform(h / 2 + 0.01, 0.99 - h / 2)
        return [cx, cy, w, h]

    return one(), one()


def test_giou_gradient_matches_finite_differences():
    """Analytic GIoU gradients vs central differences on 100 random pairs."""
    rng = np.random.default_rng(42)
    step = 1e-6
    for _ in range(100):
        a_v, b_v = _random_box_pair(rng)
        point = torch.tensor(a_v + b_v, dtype=torch.float64, requires_grad=True)

        def f(p):
            return box_giou(p[:4], p[4:])

        f(point).backward()
        analytic = point.grad.clone()
        for k in range(8):
            plus = point.detach().clone()
            minus = point.detach().clone()
            plus[k] += step
            minus[k] -= step
            fd = (float(f(plus)) - float(f(minus))) / (2 * step)
            err = abs(float(analytic[k]) - fd) / max(1.0, abs(fd))
            assert err <= 1e-4, f"coordinate {k}: analytic {analytic[k]} vs fd {fd}"
