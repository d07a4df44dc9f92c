"""IoU / generalized IoU and coordinate conversions."""

import numpy as np
import pytest
import torch

from densealign.boxes import (box_cxcywh_to_xyxy, box_xyxy_to_cxcywh, giou, iou,
                              pairwise_giou, pairwise_iou)


def random_boxes(rng, n):
    x1 = rng.uniform(0, 0.6, n)
    y1 = rng.uniform(0, 0.6, n)
    x2 = x1 + rng.uniform(0.05, 0.4, n)
    y2 = y1 + rng.uniform(0.05, 0.4, n)
    return torch.tensor(np.stack([x1, y1, x2, y2], axis=1))


class TestIoU:
    def test_identical_boxes(self):
        box = torch.tensor([0.1, 0.2, 0.5, 0.9])
        assert float(iou(box, box)) == pytest.approx(1.0)
        assert float(giou(box, box)) == pytest.approx(1.0)

    def test_disjoint_far_apart(self):
        a = torch.tensor([0.0, 0.0, 0.1, 0.1])
        b = torch.tensor([0.8, 0.8, 0.9, 0.9])
        assert float(iou(a, b)) == 0.0
        assert float(giou(a, b)) < 0.0

    def test_half_overlapping_unit_squares(self):
        # unit squares at (0,0) and (0.5,0): intersection 0.5, union 1.5
        a = torch.tensor([0.0, 0.0, 1.0, 1.0], dtype=torch.float64)
        b = torch.tensor([0.5, 0.0, 1.5, 1.0], dtype=torch.float64)
        assert float(iou(a, b)) == pytest.approx(0.5 / 1.5, abs=1e-12)

    def test_negative_area_rejected(self):
        with pytest.raises(ValueError):
            iou(torch.tensor([0.5, 0.0, 0.1, 1.0]), torch.tensor([0.0, 0.0, 1.0, 1.0]))

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(7)
        a = random_boxes(rng, 200)
        b = random_boxes(rng, 200)
        ab = iou(a, b)
        ba = iou(b, a)
        assert torch.allclose(ab, ba)
        assert float(ab.min()) >= 0.0 and float(ab.max()) <= 1.0

    def test_giou_leq_iou_and_equality_when_hull_is_union(self):
        rng = np.random.default_rng(8)
        a = random_boxes(rng, 300)
        b = random_boxes(rng, 300)
        assert torch.all(giou(a, b) <= iou(a, b) + 1e-12)
        # aligned boxes sharing full height: hull equals union when one contains the other
        outer = torch.tensor([0.0, 0.0, 1.0, 1.0], dtype=torch.float64)
        inner = torch.tensor([0.2, 0.2, 0.8, 0.8], dtype=torch.float64)
        assert float(giou(outer, inner)) == pytest.approx(float(iou(outer, inner)), abs=1e-12)

    def test_giou_range(self):
        rng = np.random.default_rng(9)
        a = random_boxes(rng, 300)
        b = random_boxes(rng, 300)
        g = giou(a, b)
        assert float(g.min()) >= -1.0 and float(g.max()) <= 1.0


class TestConversions:
    def test_roundtrip(self):
        rng = np.random.default_rng(3)
        boxes = random_boxes(rng, 50)
        back = box_cxcywh_to_xyxy(box_xyxy_to_cxcywh(boxes))
        assert torch.allclose(back, boxes, atol=1e-12)

    def test_pairwise_matches_elementwise(self):
        rng = np.random.default_rng(4)
        a = random_boxes(rng, 6)
        b = random_boxes(rng, 5)
        mat = pairwise_iou(a, b)
        for i in range(6):
            for j in range(5):
                assert float(mat[i, j]) == pytest.approx(float(iou(a[i], b[j])), abs=1e-12)
        gmat = pairwise_giou(a, b)
        assert gmat.shape == (6, 5)

    def test_empty_pairwise(self):
        a = torch.zeros((0, 4))
        b = torch.tensor([[0.0, 0.0, 1.0, 1.0]])
        assert pairwise_iou(a, b).shape == (0, 1)
