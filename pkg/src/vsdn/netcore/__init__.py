"""Model mathematics: extractor, CTC branch, semantic module, visual decoder, fusion, loss."""

from .checkpoint import (Checkpoint, CheckpointError, apply_to_model, load_checkpoint,
                         model_state_arrays, save_checkpoint)
from .config import LossWeights, ModelConfig, tiny_config
from .ctc import CTCInfeasibleError, ctc_greedy_decode, ctc_loss, ctc_nll
from .loss import LossBreakdown, NonFiniteLossError, total_loss
from .model import SEMANTIC_PREFIXES, VSDN, DecodeTrace, GeometryError, SymbolError

__all__ = [
    "Checkpoint", "CheckpointError", "apply_to_model", "load_checkpoint", "model_state_arrays",
    "save_checkpoint", "LossWeights", "ModelConfig", "tiny_config", "CTCInfeasibleError",
    "ctc_greedy_decode", "ctc_loss", "ctc_nll", "LossBreakdown", "NonFiniteLossError",
    "total_loss", "SEMANTIC_PREFIXES", "VSDN", "DecodeTrace", "GeometryError", "SymbolError",
]
