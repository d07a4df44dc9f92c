"""Loss values, gradient checks against finite differences, training mechanics."""

import numpy as np
import pytest
import torch

from densealign import runtime
from densealign.encoders import PatchGrid, stub_encoder_pair
from densealign.exceptions import LoadError
from densealign.objectives import (LossBundle, classification_loss,
                                   global_alignment_from_token, global_alignment_loss,
                                   infer_detections, load_checkpoint,
                                   object_level_baseline_loss, restore_model,
                                   save_checkpoint, train_step)
from densealign.proposals import MatchResult
from densealign.scoring import (DenseScoreMap, detector_dense_probs, fuse_score_maps,
                                roi_align_many, topk_masked_mean_many)
from densealign.vocab import EmbeddingMatrix

from oracles import central_difference_grad, relative_grad_error
from toyrun import toy_cfg


def unit_rows(vectors):
    m = np.asarray(vectors, dtype=np.float64)
    return (m / np.linalg.norm(m, axis=1, keepdims=True)).astype(np.float32)


class TestLossBundle:
    def test_total_is_weighted_sum(self):
        bundle = LossBundle(l_box=0.5, l_cls=0.25, l_g=2.0, weights=(1.0, 2.0, 0.5))
        assert bundle.total == pytest.approx(0.5 + 0.5 + 1.0, abs=1e-9)

    def test_rejects_nonfinite(self):
        from densealign.exceptions import NumericError
        with pytest.raises(NumericError):
            LossBundle(l_box=float("nan"), l_cls=0.0, l_g=0.0, weights=(1, 1, 1))


class TestClassificationLoss:
    def test_perfect_score_contributes_zero(self):
        scores = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
        match = MatchResult(pairs=((0, 0),), unmatched_queries=())
        loss = classification_loss(scores, match, [0])
        assert float(loss) == pytest.approx(0.0, abs=1e-8)

    def test_uniform_scores_give_log_c(self):
        c = 5
        scores = torch.full((2, c), 0.2, dtype=torch.float64)
        match = MatchResult(pairs=((0, 0), (1, 1)), unmatched_queries=())
        loss = classification_loss(scores, match, [2, 4])
        assert float(loss) == pytest.approx(np.log(c), abs=1e-6)

    def test_empty_match_is_zero(self):
        scores = torch.rand((3, 4), dtype=torch.float64)
        match = MatchResult(pairs=(), unmatched_queries=(0, 1, 2))
        assert float(classification_loss(scores, match, [])) == 0.0

    def test_box_only_targets_skipped(self):
        scores = torch.tensor([[0.9, 0.1], [0.5, 0.5]], dtype=torch.float64)
        match = MatchResult(pairs=((0, 0), (1, 1)), unmatched_queries=())
        with_ext = classification_loss(scores, match, [0, None])
        only_first = classification_loss(scores, MatchResult(pairs=((0, 0),),
                                                             unmatched_queries=(1,)), [0])
        assert float(with_ext) == pytest.approx(float(only_first), abs=1e-12)

    def test_gradient_vs_finite_differences(self):
        # full dense path: features -> probs -> fusion -> roi -> top-k -> CE
        rng = np.random.default_rng(0)
        emb = EmbeddingMatrix(rows=unit_rows(rng.standard_normal((2, 8))),
                              category_names=("a", "b"))
        clip_logits = rng.standard_normal((4, 4, 2))
        clip_probs = np.exp(clip_logits) / np.exp(clip_logits).sum(axis=2, keepdims=True)
        clip_map = DenseScoreMap(probs=torch.tensor(clip_probs),
                                 category_names=("a", "b"), stride=8)
        boxes = torch.tensor([[0.05, 0.1, 0.6, 0.7], [0.3, 0.25, 0.95, 0.9]],
                             dtype=torch.float64)
        match = MatchResult(pairs=((0, 0), (1, 1)), unmatched_queries=())
        labels = [0, 1]

        def loss_from(features_t: torch.Tensor) -> torch.Tensor:
            grid = PatchGrid(values=features_t, stride=8)
            s_det = detector_dense_probs(grid, emb, tau=0.5)
            fused = fuse_score_maps(s_det, clip_map, 0.25)
            rois = roi_align_many(fused, boxes, (3, 3))
            scores = topk_masked_mean_many(rois, 5)
            return classification_loss(scores, match, labels)

        feats0 = rng.standard_normal((4, 4, 8))

        def numeric_fn(params: np.ndarray) -> float:
            return float(loss_from(torch.tensor(params, dtype=torch.float64)))

        numeric = central_difference_grad(numeric_fn, feats0.copy())
        feats_t = torch.tensor(feats0, dtype=torch.float64, requires_grad=True)
        loss_from(feats_t).backward()
        assert relative_grad_error(feats_t.grad.numpy(), numeric) < 1e-3


class TestGlobalAlignment:
    def test_identical_features_zero(self):
        token = torch.tensor(np.random.default_rng(0).standard_normal(8))
        grid = PatchGrid(values=token.reshape(1, 1, 8).repeat(3, 3, 1), stride=8)
        assert float(global_alignment_from_token(grid, token)) == pytest.approx(0.0, abs=1e-9)

    def test_constant_offset_value(self):
        token = torch.zeros(8, dtype=torch.float64)
        grid = PatchGrid(values=torch.full((2, 2, 8), 0.5, dtype=torch.float64), stride=8)
        assert float(global_alignment_from_token(grid, token)) == pytest.approx(0.5, abs=1e-12)

    def test_spatial_permutation_invariance(self):
        rng = np.random.default_rng(1)
        values = torch.tensor(rng.standard_normal((3, 4, 8)))
        token = torch.tensor(rng.standard_normal(8))
        base = global_alignment_from_token(PatchGrid(values=values, stride=8), token)
        perm = rng.permutation(12)
        shuffled = values.reshape(12, 8)[perm].reshape(3, 4, 8)
        other = global_alignment_from_token(PatchGrid(values=shuffled, stride=8), token)
        assert float(base) == pytest.approx(float(other), abs=1e-12)

    def test_encoder_path_matches_token_path(self):
        _, img = stub_encoder_pair(seed=0, dim=16)
        from densealign import synthetic
        image = np.full((32, 32, 3), synthetic.BACKGROUND_RGB, dtype=np.float32)
        rng = np.random.default_rng(2)
        grid = PatchGrid(values=torch.tensor(rng.standard_normal((4, 4, 16)),
                                             dtype=torch.float32), stride=8)
        via_encoder = global_alignment_loss(grid, img, image)
        via_token = global_alignment_from_token(grid, img.pooled_class_token(image))
        assert float(via_encoder) == pytest.approx(float(via_token), abs=1e-9)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        token = torch.tensor(rng.standard_normal(8))
        feats0 = rng.standard_normal((3, 3, 8))

        def numeric_fn(params: np.ndarray) -> float:
            grid = PatchGrid(values=torch.tensor(params, dtype=torch.float64), stride=8)
            return float(global_alignment_from_token(grid, token))

        numeric = central_difference_grad(numeric_fn, feats0.copy())
        feats_t = torch.tensor(feats0, dtype=torch.float64, requires_grad=True)
        global_alignment_from_token(PatchGrid(values=feats_t, stride=8), token).backward()
        assert relative_grad_error(feats_t.grad.numpy(), numeric) < 1e-3


class TestObjectLevelBaseline:
    def test_aligned_query_near_zero(self):
        rows = unit_rows(np.eye(4)[:2])
        emb = EmbeddingMatrix(rows=rows, category_names=("a", "b"))
        queries = torch.tensor(rows.astype(np.float64)) * 3.0
        match = MatchResult(pairs=((0, 0),), unmatched_queries=(1,))
        loss = object_level_baseline_loss(queries, emb, match, [0], tau=0.01)
        assert float(loss) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_cosines_give_log_c(self):
        rows = unit_rows(np.eye(4)[:3])
        emb = EmbeddingMatrix(rows=rows, category_names=("a", "b", "c"))
        query = torch.tensor([[1.0, 1.0, 1.0, 0.0]], dtype=torch.float64)
        match = MatchResult(pairs=((0, 0),), unmatched_queries=())
        loss = object_level_baseline_loss(query, emb, match, [1], tau=0.3)
        assert float(loss) == pytest.approx(np.log(3), abs=1e-9)


class TestTrainStep:
    def build(self, **extra):
        cfg = toy_cfg(**extra)
        vocab = runtime.build_vocab(cfg)
        text_enc, img_enc = runtime.build_encoders(cfg)
        from densealign.vocab import ensemble_prompt_embeddings
        emb = ensemble_prompt_embeddings(vocab, text_enc, "base")
        state = runtime.build_state(cfg, emb, img_enc)
        data = runtime.build_data(cfg, vocab)
        return cfg, state, data

    def test_zero_lr_leaves_params_unchanged(self):
        cfg, state, data = self.build(**{"train.lr": 0.0})
        before = {k: v.clone() for k, v in state.model.state_dict().items()}
        bundle = train_step(data.train[:4], state)
        assert np.isfinite(bundle.total)
        for key, value in state.model.state_dict().items():
            torch.testing.assert_close(value, before[key], atol=0.0, rtol=0.0)

    def test_same_seed_same_trajectory(self):
        losses = []
        for _ in range(2):
            cfg, state, data = self.build()
            run = [train_step(data.train[:4], state).total for _ in range(3)]
            losses.append(run)
        assert losses[0] == losses[1]

    def test_object_align_mode_runs(self):
        cfg, state, data = self.build(**{"train.mode": "object_align",
                                         "train.loss_weights": [1.0, 2.0, 0.0]})
        bundle = train_step(data.train[:4], state)
        assert np.isfinite(bundle.total)
        assert bundle.l_g == 0.0

    def test_extension_flag_runs(self):
        cfg, state, data = self.build(**{"train.extend_box_supervision": True})
        bundle = train_step(data.train[:4], state)
        assert np.isfinite(bundle.total)

    def test_empty_batch_rejected(self):
        cfg, state, _ = self.build()
        with pytest.raises(ValueError):
            train_step([], state)


class TestInference:
    def test_detections_have_contracted_fields(self):
        cfg = toy_cfg()
        vocab = runtime.build_vocab(cfg)
        text_enc, img_enc = runtime.build_encoders(cfg)
        from densealign.vocab import ensemble_prompt_embeddings
        emb = ensemble_prompt_embeddings(vocab, text_enc, "base")
        state = runtime.build_state(cfg, emb, img_enc)
        data = runtime.build_data(cfg, vocab)
        target = ensemble_prompt_embeddings(vocab, text_enc, "target")
        dets = infer_detections(data.eval[0], state, target, score_threshold=0.0,
                                max_detections=5)
        assert len(dets) <= 5
        for det in dets:
            assert det.category in vocab.names("target")
            x1, y1, x2, y2 = det.box
            assert 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)

    def test_high_threshold_empty(self):
        cfg = toy_cfg()
        vocab = runtime.build_vocab(cfg)
        text_enc, img_enc = runtime.build_encoders(cfg)
        from densealign.vocab import ensemble_prompt_embeddings
        emb = ensemble_prompt_embeddings(vocab, text_enc, "base")
        state = runtime.build_state(cfg, emb, img_enc)
        data = runtime.build_data(cfg, vocab)
        target = ensemble_prompt_embeddings(vocab, text_enc, "target")
        assert infer_detections(data.eval[0], state, target, score_threshold=2.0) == []


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = toy_cfg()
        vocab = runtime.build_vocab(cfg)
        text_enc, img_enc = runtime.build_encoders(cfg)
        from densealign.vocab import ensemble_prompt_embeddings
        emb = ensemble_prompt_embeddings(vocab, text_enc, "base")
        state = runtime.build_state(cfg, emb, img_enc)

        path = tmp_path / "model.ckpt"
        save_checkpoint(path, state.model, meta={"note": "test"})
        arrays, meta = load_checkpoint(path)
        assert meta == {"note": "test"}
        for name, value in state.model.state_dict().items():
            assert arrays[name].tobytes() == value.numpy().tobytes()

        # save -> load -> save produces identical bytes
        other = runtime.build_state(cfg, emb, img_enc)
        restore_model(other.model, arrays)
        path2 = tmp_path / "model2.ckpt"
        save_checkpoint(path2, other.model, meta={"note": "test"})
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_payload_rejected(self, tmp_path):
        cfg = toy_cfg()
        vocab = runtime.build_vocab(cfg)
        text_enc, img_enc = runtime.build_encoders(cfg)
        from densealign.vocab import ensemble_prompt_embeddings
        emb = ensemble_prompt_embeddings(vocab, text_enc, "base")
        state = runtime.build_state(cfg, emb, img_enc)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, state.model)
        blob = path.read_bytes()
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(blob[:-100])
        with pytest.raises(LoadError, match="truncated"):
            load_checkpoint(bad)
