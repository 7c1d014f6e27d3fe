"""Multi-scale patch embedding (MSPE) for resolution-adaptive vision transformers."""

from ._accel import USE_NUMBA
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import Dataset, SyntheticShapesSpec, generate_synthetic, load_idx
from .evaluate import EvalReport, Mode, ModelState, cosine_similarity_diag, sweep
from .patch_embed import (PatchKernelBank, ResolutionTooSmall, bank_from_pretrained, embed, select_kernel,
                          token_count)
from .resize import ResizeOperator, build_resize_operator, pi_resize_kernel, pseudo_inverse
from .train import SGD, TrainConfig, mspe_train, pretrain
from .vit import ViTParams, encoder_backward, encoder_forward

__version__ = "0.1.0"
