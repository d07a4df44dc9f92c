"""Set matching, box losses, branch splitting, and the proposal network contract."""

import json

import numpy as np
import pytest
import torch

from densealign.model import ProposalNetwork, build_detector
from densealign.encoders import PatchGrid
from densealign.proposals import (DecoderConfig, MatchResult, Proposal, bipartite_match,
                                  box_loss, generate_proposals, match_cost_matrix,
                                  proposals_from_tensors, split_branches,
                                  write_proposals_jsonl)

from oracles import central_difference_grad, exhaustive_min_assignment_cost, \
    relative_grad_error


def random_instance(rng, n_queries, n_targets):
    boxes = torch.tensor(np.stack([
        rng.uniform(0.2, 0.8, n_queries), rng.uniform(0.2, 0.8, n_queries),
        rng.uniform(0.05, 0.35, n_queries), rng.uniform(0.05, 0.35, n_queries)], axis=1))
    objectness = torch.tensor(rng.uniform(0.05, 0.95, n_queries))
    targets = torch.tensor(np.stack([
        rng.uniform(0.2, 0.8, n_targets), rng.uniform(0.2, 0.8, n_targets),
        rng.uniform(0.05, 0.35, n_targets), rng.uniform(0.05, 0.35, n_targets)], axis=1)) \
        if n_targets else torch.zeros((0, 4), dtype=torch.float64)
    return boxes, objectness, targets


class TestProposalType:
    def test_valid(self):
        p = Proposal(box=(0.5, 0.5, 0.4, 0.3), objectness=0.7)
        assert p.box_xyxy == pytest.approx((0.3, 0.35, 0.7, 0.65))

    def test_invalid(self):
        with pytest.raises(ValueError):
            Proposal(box=(0.5, 0.5, 0.0, 0.3), objectness=0.5)
        with pytest.raises(ValueError):
            Proposal(box=(1.5, 0.5, 0.2, 0.3), objectness=0.5)
        with pytest.raises(ValueError):
            Proposal(box=(0.5, 0.5, 0.2, 0.3), objectness=1.5)


class TestBipartiteMatch:
    def test_single_pair(self):
        props = [Proposal(box=(0.5, 0.5, 0.2, 0.2), objectness=0.9)]
        match = bipartite_match(props, [[0.5, 0.5, 0.2, 0.2]])
        assert match.pairs == ((0, 0),)
        assert match.unmatched_queries == ()

    def test_empty_targets(self):
        props = [Proposal(box=(0.5, 0.5, 0.2, 0.2), objectness=0.9)] * 3
        match = bipartite_match(props, [])
        assert match.pairs == ()
        assert match.unmatched_queries == (0, 1, 2)

    def test_two_by_two_diagonal(self):
        # cost matrix [[1, 2], [2, 1]] -> pairs (0,0), (1,1), total 2
        cost = np.array([[1.0, 2.0], [2.0, 1.0]])
        assert exhaustive_min_assignment_cost(cost) == pytest.approx(2.0)
        boxes = torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]])
        targets = torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]])
        match = bipartite_match((boxes, torch.ones(2)), targets)
        assert match.pairs == ((0, 0), (1, 1))

    def test_optimal_vs_exhaustive(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n_q = int(rng.integers(1, 7))
            n_t = int(rng.integers(1, 7))
            boxes, objectness, targets = random_instance(rng, n_q, n_t)
            cost = match_cost_matrix(boxes, objectness, targets).numpy()
            match = bipartite_match((boxes, objectness), targets)
            achieved = sum(cost[q, t] for q, t in match.pairs)
            assert achieved == pytest.approx(exhaustive_min_assignment_cost(cost), abs=1e-9)
            assert len(match.pairs) == min(n_q, n_t)

    def test_match_result_invariants(self):
        with pytest.raises(ValueError):
            MatchResult(pairs=((0, 0), (0, 1)), unmatched_queries=())
        with pytest.raises(ValueError):
            MatchResult(pairs=((0, 0),), unmatched_queries=(0,))


class TestBoxLoss:
    def test_perfect_prediction_is_zero(self):
        boxes = torch.tensor([[0.5, 0.5, 0.2, 0.2], [0.3, 0.7, 0.1, 0.1]], dtype=torch.float64)
        objectness = torch.ones(2, dtype=torch.float64)
        match = MatchResult(pairs=((0, 0), (1, 1)), unmatched_queries=())
        out = box_loss((boxes, objectness), boxes.clone(), match)
        assert float(out.l1) == 0.0
        assert float(out.giou) == pytest.approx(0.0, abs=1e-12)
        assert float(out.objectness_bce) == pytest.approx(0.0, abs=1e-6)

    def test_l1_term_value(self):
        # matched box off by 0.1 in each coordinate with unit weight -> 0.4
        boxes = torch.tensor([[0.5, 0.5, 0.3, 0.3]], dtype=torch.float64)
        targets = torch.tensor([[0.4, 0.4, 0.2, 0.2]], dtype=torch.float64)
        match = MatchResult(pairs=((0, 0),), unmatched_queries=())
        out = box_loss((boxes, torch.ones(1, dtype=torch.float64)), targets, match,
                       loss_weights=(0.0, 1.0, 0.0))
        assert float(out.l1) == pytest.approx(0.4, abs=1e-9)
        assert float(out.total) == pytest.approx(0.4, abs=1e-9)

    def test_zero_iff_perfect(self):
        boxes = torch.tensor([[0.5, 0.5, 0.2, 0.2], [0.2, 0.2, 0.1, 0.1]], dtype=torch.float64)
        objectness = torch.tensor([1.0, 0.0], dtype=torch.float64)
        match = MatchResult(pairs=((0, 0),), unmatched_queries=(1,))
        out = box_loss((boxes, objectness), boxes[:1].clone(), match)
        assert float(out.total) == pytest.approx(0.0, abs=1e-6)
        # any imperfection makes it positive
        out2 = box_loss((boxes, torch.tensor([0.9, 0.0], dtype=torch.float64)),
                        boxes[:1].clone(), match)
        assert float(out2.total) > 0.0

    def test_terms_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            boxes, objectness, targets = random_instance(rng, 4, 2)
            match = bipartite_match((boxes, objectness), targets)
            out = box_loss((boxes, objectness), targets, match)
            assert float(out.objectness_bce) >= 0
            assert float(out.l1) >= 0
            assert float(out.giou) >= 0
            assert float(out.total) >= 0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        boxes, objectness, targets = random_instance(rng, 4, 3)
        match = bipartite_match((boxes, objectness), targets)

        params0 = np.concatenate([boxes.numpy().reshape(-1), objectness.numpy()])

        def loss_of(params: np.ndarray) -> float:
            b = torch.tensor(params[:16].reshape(4, 4), dtype=torch.float64)
            o = torch.tensor(params[16:], dtype=torch.float64)
            return float(box_loss((b, o), targets, match).total)

        numeric = central_difference_grad(loss_of, params0.copy())

        b = torch.tensor(params0[:16].reshape(4, 4), dtype=torch.float64,
                         requires_grad=True)
        o = torch.tensor(params0[16:], dtype=torch.float64, requires_grad=True)
        box_loss((b, o), targets, match).total.backward()
        analytic = np.concatenate([b.grad.numpy().reshape(-1), o.grad.numpy()])
        assert relative_grad_error(analytic, numeric) < 1e-3


class TestSplitBranches:
    def test_degenerate_split_equals_final(self):
        cfg = DecoderConfig(num_queries=4, num_layers=3, split_layer=3, hidden_dim=16,
                            num_heads=4)
        states = torch.arange(3 * 2 * 4 * 16, dtype=torch.float32).reshape(3, 2, 4, 16)
        box_in, cls_in = split_branches(states, cfg)
        torch.testing.assert_close(box_in, cls_in)

    def test_first_layer_split(self):
        cfg = DecoderConfig(num_queries=4, num_layers=3, split_layer=1, hidden_dim=16,
                            num_heads=4)
        states = torch.randn(3, 2, 4, 16)
        _, cls_in = split_branches(states, cfg)
        torch.testing.assert_close(cls_in, states[0])

    def test_layer_count_checked(self):
        cfg = DecoderConfig(num_queries=4, num_layers=3, split_layer=2, hidden_dim=16,
                            num_heads=4)
        with pytest.raises(ValueError):
            split_branches(torch.randn(2, 1, 4, 16), cfg)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            DecoderConfig(num_layers=3, split_layer=4)


class TestProposalNetwork:
    def cfg(self):
        return DecoderConfig(num_queries=7, num_layers=2, split_layer=1, hidden_dim=32,
                             num_heads=4, num_encoder_layers=1)

    def test_contract_and_determinism(self):
        torch.manual_seed(0)
        net = ProposalNetwork(feature_dim=12, cfg=self.cfg())
        grid = PatchGrid(values=torch.randn(4, 4, 12), stride=8)
        props = generate_proposals(grid, net)
        assert len(props) == 7
        for p in props:
            assert 0.0 < p.box[2] <= 1.0 and 0.0 < p.box[3] <= 1.0
            assert 0.0 <= p.objectness <= 1.0
        again = generate_proposals(PatchGrid(values=grid.values.clone(), stride=8), net)
        assert [p.box for p in props] == [p.box for p in again]
        assert [p.objectness for p in props] == [p.objectness for p in again]

    def test_states_shape_matches_config(self):
        torch.manual_seed(1)
        net = ProposalNetwork(feature_dim=12, cfg=self.cfg())
        grid = PatchGrid(values=torch.randn(4, 4, 12), stride=8)
        _, _, states = net.propose(grid)
        assert states.shape == (2, 7, 32)

    def test_detector_seeded_build_is_reproducible(self):
        cfg = self.cfg()
        m1 = build_detector(embed_dim=16, decoder_cfg=cfg, fuse_levels=(3, 4), seed=5)
        m2 = build_detector(embed_dim=16, decoder_cfg=cfg, fuse_levels=(3, 4), seed=5)
        for (n1, p1), (n2, p2) in zip(m1.state_dict().items(), m2.state_dict().items()):
            assert n1 == n2
            torch.testing.assert_close(p1, p2)


class TestProposalDump:
    def test_jsonl_format(self, tmp_path):
        path = tmp_path / "props.jsonl"
        write_proposals_jsonl(path, {
            2: [Proposal(box=(0.5, 0.5, 0.2, 0.2), objectness=0.75)],
            1: [Proposal(box=(0.25, 0.25, 0.1, 0.1), objectness=0.5)],
        })
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert [entry["image_id"] for entry in lines] == [1, 2]
        assert lines[1] == {"image_id": 2, "box": [0.5, 0.5, 0.2, 0.2], "objectness": 0.75}

    def test_tensor_roundtrip(self):
        boxes = torch.tensor([[0.5, 0.5, 0.25, 0.125]])
        objectness = torch.tensor([0.625])
        props = proposals_from_tensors(boxes, objectness)
        assert props[0].box == (0.5, 0.5, 0.25, 0.125)
        assert props[0].objectness == 0.625
