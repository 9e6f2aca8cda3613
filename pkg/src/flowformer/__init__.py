"""Flow-Attention: linear-time attention through flow conservation.

The kernels take plain numpy arrays of shape ``(..., n, d)``; the same code
records a gradient tape when given :class:`flowformer.autodiff.Var` inputs.
"""

from .attention import (AttentionConfig, FlowStats, attend, canonical_attention,
                        flow_attention_causal, flow_attention_normal, flow_oracle_causal,
                        flow_oracle_dense, linear_attention_baseline)
from .errors import (ContractError, DataError, DimensionError, DomainError, FlowformerError,
                     NumericalError, ResourceError, TrainingDiverged, UnsupportedOperationError)
from .model import Checkpoint, ModelConfig, forward, init_parameters, parameter_count

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "FlowStats", "attend", "canonical_attention", "flow_attention_causal",
    "flow_attention_normal", "flow_oracle_causal", "flow_oracle_dense", "linear_attention_baseline",
    "ContractError", "DataError", "DimensionError", "DomainError", "FlowformerError",
    "NumericalError", "ResourceError", "TrainingDiverged", "UnsupportedOperationError",
    "Checkpoint", "ModelConfig", "forward", "init_parameters", "parameter_count",
]
