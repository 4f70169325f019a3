"""Tag-based cross-domain cold-start retrieval toolkit."""

from .autodiff import (DomainError, Ref, ShapeMismatchError, Tape, apply_primitive,
                       backward, finite_diff_check, tensor)
from .data import (InteractionLog, Item, ItemCatalog, SplitResult, SyntheticConfig,
                   TestCase, leave_one_out_split, load_catalog, load_interactions,
                   sample_eval_negatives, synth_generate, training_pairs)
from .encoder import SequenceBatch, embed_item, encode_content, encode_history, make_batch, weighted_aggregate
from .evalkit import EvalReport, baseline_scores, evaluate, rank_and_score
from .memtree import (AnnealSchedule, MemoryTree, gumbel_sample, group_representation,
                      ortho_penalty, propagate_weights, select_topk, temperature)
from .model import (NegativeQueue, TrainConfig, Trainer, contrastive_loss,
                    load_checkpoint, save_checkpoint, train_step, user_forward)
from .optim import AdamState, adam_step
from .spectral import DegenerateIterateError, spectral_norm_estimate

__version__ = "0.1.0"
