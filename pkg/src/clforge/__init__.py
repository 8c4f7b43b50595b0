"""Continual bi-modal segmentation with prompt-routed low-rank adapters,
hard-sample replay, and Fisher-anchored consolidation, on a self-contained
float64 autodiff core small enough for exhaustive gradient checking."""

from .adapters import (AdapterBank, AllocationDecision, LoraAdapter,
                       cosine_similarity, trainable_count)
from .checkpoint import (CheckpointError, load_state, read_container,
                         save_state, write_container)
from .consolidation import (Anchor, FisherMap, compute_fisher,
                            difficulty_weight, ewc_penalty, snapshot_anchor)
from .losses import batched_losses, bce_np, dice_loss, sample_loss, seg_loss
from .memory import (BufferEntry, TaskMemory, average_fisher, build_buffer,
                     replay_weight, sample_replay, score_difficulties,
                     score_difficulty)
from .metrics import (ResultsMatrix, build_summary, dice, emit_report,
                      matrix_from_csv, matrix_to_csv)
from .model import (BiModalSegmenter, FreezeViolation, PretrainGateError,
                    PromptEmbedding, patchify, patchify_masks, predict_masks,
                    pretrain_base, pretrained_base, tokenize)
from .optim import AdamW
from .taskgen import (GenerationError, Sample, TaskSpec, cached_dataset,
                      default_suites, export_dataset, generate,
                      import_dataset, load_suite, pretext_dataset, sample_at)
from .tensorcore import (NonFiniteError, Tensor, concat, finite_diff_check,
                         no_grad)
from .trainer import (MODES, ContinualState, DivergenceError, ModeFlags,
                      RunLog, TrainConfig, evaluate_task, init_state,
                      mode_flags, replay_quota, run_sequence, train_task)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AdapterBank", "AllocationDecision", "Anchor",
    "BiModalSegmenter", "BufferEntry", "CheckpointError", "ContinualState",
    "DivergenceError", "FisherMap", "FreezeViolation", "GenerationError",
    "LoraAdapter", "MODES", "ModeFlags", "NonFiniteError",
    "PretrainGateError", "PromptEmbedding", "ResultsMatrix", "RunLog",
    "Sample", "TaskMemory", "TaskSpec", "Tensor", "TrainConfig",
    "average_fisher", "batched_losses", "bce_np", "build_buffer",
    "build_summary", "cached_dataset", "compute_fisher", "concat",
    "cosine_similarity", "default_suites", "dice", "dice_loss",
    "difficulty_weight", "emit_report", "evaluate_task", "ewc_penalty",
    "export_dataset", "finite_diff_check", "generate", "import_dataset",
    "init_state", "load_state", "load_suite", "matrix_from_csv",
    "matrix_to_csv", "mode_flags", "no_grad", "patchify", "patchify_masks",
    "predict_masks", "pretext_dataset", "pretrain_base", "pretrained_base",
    "read_container", "replay_quota", "replay_weight", "run_sequence",
    "sample_at", "sample_loss", "sample_replay", "save_state",
    "score_difficulties", "score_difficulty", "seg_loss", "snapshot_anchor",
    "tokenize", "train_task", "trainable_count", "write_container",
]
