"""Autodiff core: tape tensors, the certified primitive set, gradcheck."""
from .tensor import (Tensor, Parameter, ParamStore, ShapeError,
                     NonFiniteError, as_tensor, check_finite)
from . import ops
from .gradcheck import (GradCheckReport, finite_difference_gradient,
                        gradient_check, primitive_suite)

__all__ = [
    "Tensor", "Parameter", "ParamStore", "ShapeError", "NonFiniteError",
    "as_tensor", "check_finite", "ops", "GradCheckReport",
    "finite_difference_gradient", "gradient_check", "primitive_suite",
]
