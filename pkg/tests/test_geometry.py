import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from querydistill import geometry
from querydistill.geometry import Box

from conftest import central_diff, rel_err


def random_box(rng):
    w = float(rng.uniform(0.05, 0.6))
    h = float(rng.uniform(0.05, 0.6))
    cx = float(rng.uniform(w / 2, 1 - w / 2))
    cy = float(rng.uniform(h / 2, 1 - h / 2))
    return Box(cx, cy, w, h)


boxes_strategy = st.builds(
    Box,
    cx=st.floats(0.2, 0.8),
    cy=st.floats(0.2, 0.8),
    w=st.floats(0.01, 0.4),
    h=st.floats(0.01, 0.4),
)


class TestCorners:
    def test_full_image_box(self):
        assert geometry.to_corners(Box(0.5, 0.5, 1, 1)) == (0.0, 0.0, 1.0, 1.0)

    def test_half_image_box(self):
        x1, y1, x2, y2 = geometry.to_corners(Box(0.25, 0.5, 0.5, 1))
        assert (x1, y1, x2, y2) == pytest.approx((0.0, 0.0, 0.5, 1.0), abs=1e-12)

    def test_round_trip_on_random_boxes(self, rng):
        for _ in range(1000):
            b = random_box(rng)
            back = geometry.from_corners(*geometry.to_corners(b))
            for got, want in zip(back.as_tuple(), b.as_tuple()):
                assert abs(got - want) < 1e-9


class TestBoxInvariants:
    def test_degenerate_size_clamped(self):
        b = Box(0.5, 0.5, 0.0, -1.0)
        assert b.w == geometry.SIZE_EPS
        assert b.h == geometry.SIZE_EPS

    def test_center_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            Box(1.5, 0.5, 0.1, 0.1)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Box(float("nan"), 0.5, 0.1, 0.1)


class TestIou:
    def test_identity(self):
        b = Box(0.3, 0.4, 0.2, 0.3)
        assert geometry.iou(b, b) == 1.0

    def test_half_overlap_by_hand(self):
        # inter 0.5, union 1.0
        a = Box(0.5, 0.5, 1, 1)
        b = Box(0.25, 0.5, 0.5, 1)
        assert geometry.iou(a, b) == pytest.approx(0.5, abs=1e-12)

    def test_disjoint(self):
        a = Box(0.2, 0.2, 0.1, 0.1)
        b = Box(0.8, 0.8, 0.1, 0.1)
        assert geometry.iou(a, b) == 0.0


class TestGiou:
    def test_identity(self):
        b = Box(0.3, 0.4, 0.2, 0.3)
        assert geometry.giou(b, b) == 1.0

    def test_disjoint_by_hand(self):
        # enclosure 0.36, union 0.02
        a = Box(0.25, 0.25, 0.1, 0.1)
        b = Box(0.75, 0.75, 0.1, 0.1)
        assert geometry.giou(a, b) == pytest.approx(-0.9444, abs=1e-4)

    def test_contained_box_no_penalty(self):
        # enclosure equals union, penalty 0
        a = Box(0.5, 0.5, 1, 1)
        b = Box(0.25, 0.5, 0.5, 1)
        assert geometry.giou(a, b) == pytest.approx(0.5, abs=1e-12)

    @given(a=boxes_strategy, b=boxes_strategy)
    @settings(max_examples=200, deadline=None)
    def test_bounded_below_iou(self, a, b):
        assert geometry.giou(a, b) <= geometry.iou(a, b) + 1e-12
        assert -1.0 < geometry.giou(a, b) <= 1.0

    @given(a=boxes_strategy, b=boxes_strategy)
    @settings(max_examples=200, deadline=None)
    def test_symmetry(self, a, b):
        assert geometry.iou(a, b) == geometry.iou(b, a)
        assert geometry.giou(a, b) == geometry.giou(b, a)


class TestL1:
    def test_zero_on_identity(self):
        b = Box(0.3, 0.4, 0.2, 0.3)
        assert geometry.l1_distance(b, b) == 0.0

    def test_hand_value(self):
        a = Box(0.5, 0.5, 0.2, 0.2)
        b = Box(0.6, 0.5, 0.2, 0.4)
        assert geometry.l1_distance(a, b) == pytest.approx(0.3, abs=1e-12)

    def test_triangle_inequality(self, rng):
        for _ in range(200):
            a, b, c = (random_box(rng) for _ in range(3))
            assert geometry.l1_distance(a, c) <= (
                geometry.l1_distance(a, b) + geometry.l1_distance(b, c) + 1e-12
            )


class TestTensorPath:
    def test_matches_scalar_path(self, rng):
        boxes_a = [random_box(rng) for _ in range(16)]
        boxes_b = [random_box(rng) for _ in range(9)]
        ta = geometry.boxes_to_tensor(boxes_a)
        tb = geometry.boxes_to_tensor(boxes_b)
        iou_m = geometry.pairwise_iou(ta, tb)
        giou_m = geometry.pairwise_giou(ta, tb)
        l1_m = geometry.pairwise_l1(ta, tb)
        for i, a in enumerate(boxes_a):
            for j, b in enumerate(boxes_b):
                assert float(iou_m[i, j]) == pytest.approx(geometry.iou(a, b), abs=1e-12)
                assert float(giou_m[i, j]) == pytest.approx(geometry.giou(a, b), abs=1e-12)
                assert float(l1_m[i, j]) == pytest.approx(
                    geometry.l1_distance(a, b), abs=1e-12
                )

    def test_paired_variants_diagonal(self, rng):
        boxes = geometry.boxes_to_tensor([random_box(rng) for _ in range(8)])
        others = geometry.boxes_to_tensor([random_box(rng) for _ in range(8)])
        assert torch.allclose(
            geometry.paired_iou(boxes, others),
            geometry.pairwise_iou(boxes, others).diagonal(),
        )


class TestGradients:
    """Analytic partials match central differences away from kinks."""

    @staticmethod
    def _well_separated(rng):
        # keep every coordinate difference above 1e-3 so no kink is near
        while True:
            a, b = random_box(rng), random_box(rng)
            deltas = [abs(x - y) for x, y in zip(a.as_tuple(), b.as_tuple())]
            ax1, ay1, ax2, ay2 = geometry.to_corners(a)
            bx1, by1, bx2, by2 = geometry.to_corners(b)
            corner_deltas = [abs(ax1 - bx1), abs(ay1 - by1), abs(ax2 - bx2), abs(ay2 - by2)]
            if min(deltas + corner_deltas) > 1e-3 and geometry.iou(a, b) > 0.01:
                return a, b

    @pytest.mark.parametrize("fn_name", ["paired_iou", "paired_giou", "paired_l1"])
    def test_finite_differences(self, rng, fn_name):
        fn = getattr(geometry, fn_name)
        checked = 0
        for _ in range(40):
            a, b = self._well_separated(rng)
            ta = torch.tensor(a.as_tuple(), dtype=torch.float64, requires_grad=True)
            tb = torch.tensor(b.as_tuple(), dtype=torch.float64)
            value = fn(ta, tb)
            value.backward()
            analytic = ta.grad.clone()
            numeric = central_diff(lambda x: fn(x, tb), ta.detach().clone())
            for k in range(4):
                an, nu = float(analytic[k]), float(numeric[k])
                if max(abs(an), abs(nu)) < 1e-8:
                    continue
                assert rel_err(an, nu) < 1e-4, (fn_name, k, an, nu)
                checked += 1
        assert checked >= 32
