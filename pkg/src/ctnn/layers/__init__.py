from .attention import (
    CopresheafAttention,
    CopresheafTransformerLayer,
    TransformerConfig,
    cross_attention_forward,
    neighborhood_mask,
    self_attention_forward,
    transformer_layer_forward,
)
from .conv import CopresheafConv, copresheaf_conv_forward, direct_convolution, grid_offsets
from .gnn import CopresheafGNN, copresheaf_gnn_forward
from .message_passing import CmpnnLayer, HompLayer, cmpnn_forward, homp_forward

__all__ = [
    "CmpnnLayer",
    "HompLayer",
    "cmpnn_forward",
    "homp_forward",
    "CopresheafAttention",
    "CopresheafTransformerLayer",
    "TransformerConfig",
    "self_attention_forward",
    "cross_attention_forward",
    "transformer_layer_forward",
    "neighborhood_mask",
    "CopresheafConv",
    "copresheaf_conv_forward",
    "direct_convolution",
    "grid_offsets",
    "CopresheafGNN",
    "copresheaf_gnn_forward",
]
