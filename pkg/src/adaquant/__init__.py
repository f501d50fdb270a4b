"""adaquant: quantization-aware training with learned per-layer scale and
zero-point, plus lowering to a bit-exact integer-only inference engine."""

from .autodiff import Tensor, backward, conv2d, linear, register_custom_grad
from .calibrate import (
    ActivationStats,
    calibrate_model,
    collect_stats,
    init_quant_params,
    sqnr_db,
    sqnr_linear_search,
)
from .engine import (
    FixedPointMultiplier,
    LoweredLayer,
    LoweredModel,
    compute_requant,
    fold_bias,
    integer_layer_forward,
    lower_model,
    residual_add_int,
)
from .layers import (
    Activation,
    LayerSpec,
    Model,
    QuantLayer,
    activation_apply,
    build_model,
    cross_entropy,
    desk_cnn_specs,
    layer_forward_qat,
    residual_add,
)
from .quant import (
    QuantParams,
    QuantizedTensor,
    dequantize,
    fake_quant,
    fake_quant_array,
    grad_input,
    grad_scale,
    grad_zero_point,
    normalize_activation,
    normalize_weight,
    q_int,
    quantize,
    ste_mask,
)
from .training import TrainConfig, evaluate, qat_step, qat_train, train_float

__version__ = "0.1.0"
