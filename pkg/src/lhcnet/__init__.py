"""Local multi-head channel self-attention (LHC) on a numpy autodiff core."""

from .attention import (
    LhcConfig,
    LhcWeights,
    attention_scores,
    compute_qkv,
    dynamic_scaling,
    embed_qk,
    head_attention,
    lhc_branch,
    lhc_forward,
    merge_heads,
    split_heads,
)
from .backbone import (
    BackboneSpec,
    Model,
    build_full_spec,
    build_tiny_spec,
    count_params,
    gated_residual,
    init_model,
    tiny_forward,
)
from .tensor import ConfigError, GradTape, ShapeError, Tensor, backward

__version__ = "0.1.0"
