from .tensor import (Tensor, as_tensor, checked, default_dtype, is_grad_enabled,
                     no_grad, stop_gradient, use_dtype)
from .ops import (avg_pool3d, cat, conv3d, cross_entropy, embedding, gelu,
                  index_select, softmax, softplus, upsample_nearest3d)
from .modules import (AttentionBlock, Conv3d, Embedding, LayerNorm, Linear,
                      MLP, trunc_normal)
from .store import ParameterStore, content_hash
from .optim import AdamW, WarmupCosineSchedule
from .gradcheck import fd_check

__all__ = [
    "Tensor", "as_tensor", "checked", "default_dtype", "is_grad_enabled",
    "no_grad", "stop_gradient", "use_dtype",
    "avg_pool3d", "cat", "conv3d", "cross_entropy", "embedding", "gelu",
    "index_select", "softmax", "softplus", "upsample_nearest3d",
    "AttentionBlock", "Conv3d", "Embedding", "LayerNorm", "Linear", "MLP",
    "trunc_normal",
    "ParameterStore", "content_hash", "AdamW", "WarmupCosineSchedule",
    "fd_check",
]
