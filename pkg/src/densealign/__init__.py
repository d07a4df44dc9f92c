"""Open-vocabulary object detection via dense alignment to text embeddings.

A desk-scale detector that classifies class-agnostic proposals from a dense
per-location score map: trainable features are cosine-aligned to frozen
text embeddings at every grid cell, fused geometrically with the frozen
vision-language encoder's own dense scores, and pooled per proposal by a
top-k masked mean. Train with base-category boxes only; swap in any target
vocabulary at inference.
"""

from .boxes import box_cxcywh_to_xyxy, box_xyxy_to_cxcywh, giou, iou
from .datasets import (BoxAnnotation, ImageSample, batch_iterator, flip_sample,
                       load_coco_annotations, synth_shapes)
from .encoders import (FrozenImageEncoder, PatchGrid, StubImageEncoder, StubTextEncoder,
                       TextEncoder, build_encoder_pair, clip_similarity,
                       masked_dense_embeddings, register_encoder, stub_encoder_pair)
from .exceptions import ConfigError, DenseAlignError, LoadError, NumericError
from .metrics import (EvalReport, ap50_generalized, average_recall_topn,
                      format_report_table, novel_base_similarity_ranking)
from .model import OpenVocabDetector, ProposalNetwork, build_detector
from .objectives import (Detection, LossBundle, TrainSettings, TrainState,
                         classification_loss, fit, global_alignment_loss,
                         infer_detections, load_checkpoint, make_train_state,
                         object_level_baseline_loss, restore_model, run_evaluation,
                         save_checkpoint, train_step)
from .proposals import (DecoderConfig, MatchResult, Proposal, bipartite_match, box_loss,
                        generate_proposals, split_branches, write_proposals_jsonl)
from .scoring import (DenseScoreMap, DenseScoringConfig, ProposalScores, TopKMask,
                      classify_proposals, clip_dense_probs, detector_dense_probs,
                      export_semantic_maps, fuse_backbone_levels, fuse_score_maps,
                      roi_align, roi_align_many, topk_mask, topk_masked_mean)
from .vocab import (DEFAULT_PROMPT_TEMPLATES, CategoryVocabulary, EmbeddingMatrix,
                    build_vocabulary, ensemble_prompt_embeddings, load_embeddings,
                    save_embeddings)

__version__ = "0.1.0"
