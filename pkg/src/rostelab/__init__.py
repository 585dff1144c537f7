"""Rotation-enabled quantization-aware training laboratory."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DivergenceError,
    DomainError,
    RosteLabError,
    ShapeError,
    UnsupportedDimensionError,
    UsageError,
)
from .hadamard import RotationChoice, apply_rotation, check_prop1, fwht_apply, materialize
from .numkit import Rng, gaussian, matmul, rademacher
from .qnet import (
    CROSS_ENTROPY,
    QUADRATIC,
    LayerParams,
    LossKind,
    QNetState,
    backward_ste,
    forward,
    loss_and_grad,
    prediction_error_quantized,
)
from .quant import QuantSpec, QuantizedTensor, dequantize, fake_quantize, quant_error_sq, quantize
from .roste import (
    RosteConfig,
    Theorem1Setup,
    TrainTrajectory,
    build_theorem1_setup,
    make_regression_task,
    qat_stage,
    run_roste,
    run_theorem1_recursion,
    select_rotations,
    surrogate_error,
    verify_theorem1_bound,
)
