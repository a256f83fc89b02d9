"""Vision Transformer with an external memory of per-head attention facts."""

from .attention import knn_lookup, memory_attention, gated_fuse, movit_block_forward
from .memory import (AttentionFact, MemoryBank, ScheduleState, alpha_schedule, bank_size, cache_or_update,
                     load_bank, save_bank)
from .pal import (PrototypeBank, aggregate_values, distill, greedy_select_prototypes, load_prototypes,
                  mmd_squared, save_prototypes)
from .train import Metrics, Model, TrainConfig, evaluate, fit, train_epoch
from .vit import ViTConfig, init_params, vit_forward

__version__ = "0.1.0"
