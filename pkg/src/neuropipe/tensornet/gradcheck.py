"""Finite-difference verification of backward passes."""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any, Optional

# Third-party Modules:
import numpy as np

# Local Modules:
from .losses import lossFunction
from .model import Model
from .ops import project
from .tensor import ArrayType, Tensor, noGrad


DEFAULT_STEP: float = 1e-5
DEFAULT_TOLERANCE: float = 1e-6


logger: logging.Logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradCheckReport:
	"""The worst relative error per checked tensor."""

	errors: dict[str, float]
	tolerance: float

	@property
	def maxError(self) -> float:
		"""The largest error over every tensor."""
		return max(self.errors.values(), default=0.0)

	@property
	def worst(self) -> Optional[str]:
		"""The tensor with the largest error."""
		return max(self.errors, key=self.errors.__getitem__) if self.errors else None

	@property
	def passed(self) -> bool:
		"""True if every error is within the tolerance."""
		return self.maxError < self.tolerance


def relativeError(analytic: ArrayType, numeric: ArrayType) -> float:
	"""
	Computes the normwise relative error `|a - n| / max(|a|, |n|)`.

	Args:
		analytic: The backward-pass gradient.
		numeric: The finite-difference gradient.

	Returns:
		The error, 0 if both gradients vanish.
	"""
	scale: float = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
	if scale == 0:
		return 0.0
	return float(np.linalg.norm(analytic - numeric)) / scale


def _numericGradient(objective: Callable[[], float], array: ArrayType, h: float) -> ArrayType:
	gradient: ArrayType = np.zeros_like(array)
	for index in np.ndindex(*array.shape):
		original: Any = array[index]
		array[index] = original + h
		plus: float = objective()
		array[index] = original - h
		minus: float = objective()
		array[index] = original
		gradient[index] = (plus - minus) / (2 * h)
	return gradient


def gradCheck(
	function: Callable[..., Tensor],
	inputs: Sequence[Any],
	h: float = DEFAULT_STEP,
	tolerance: float = DEFAULT_TOLERANCE,
	*,
	seed: int = 0,
) -> GradCheckReport:
	"""
	Compares the gradient of a tensor function with central differences in float64.

	A function with more than one output element is reduced to a scalar by a fixed random
	projection.

	Args:
		function: Maps input tensors to an output tensor.
		inputs: The input arrays, converted to float64.
		h: The finite-difference step.
		tolerance: The largest acceptable relative error.
		seed: Seeds the projection.

	Returns:
		The error of every input, keyed `input0`, `input1`, ...
	"""
	arrays: list[ArrayType] = [np.array(item, dtype=np.float64) for item in inputs]
	tensors: list[Tensor] = [Tensor(array, requiresGrad=True) for array in arrays]
	output: Tensor = function(*tensors)
	weights: ArrayType = np.random.default_rng(seed).standard_normal(output.shape)

	def objective() -> float:
		with noGrad():
			return float((function(*(Tensor(array) for array in arrays)).data * weights).sum())

	project(output, weights).backward()
	errors: dict[str, float] = {}
	for index, (array, tensor) in enumerate(zip(arrays, tensors)):
		analytic: ArrayType = tensor.grad if tensor.grad is not None else np.zeros_like(array)
		errors[f"input{index}"] = relativeError(analytic, _numericGradient(objective, array, h))
	report = GradCheckReport(errors, tolerance)
	logger.debug(f"Gradient check: max error {report.maxError:.3e} at {report.worst}.")
	return report


def gradCheckModel(
	model: Model,
	x: ArrayType,
	target: ArrayType,
	h: float = DEFAULT_STEP,
	tolerance: float = 1e-5,
	*,
	training: bool = False,
	seed: int = 0,
	names: Optional[Sequence[str]] = None,
) -> GradCheckReport:
	"""
	Compares the parameter gradients of a model's loss with central differences in float64.

	Args:
		model: The model. It is copied to float64 and left untouched.
		x: The input batch.
		target: The target batch.
		h: The finite-difference step.
		tolerance: The largest acceptable relative error.
		training: Evaluate in training mode. Dropout draws from the same seed on every evaluation.
		seed: Seeds dropout.
		names: The parameters to check; all by default.

	Returns:
		The error of every checked parameter.
	"""
	precise: Model = model.astype(np.float64)
	loss = lossFunction(str(precise.config.get("cost_function", "soft_dice")))
	inputs: Tensor = Tensor(np.asarray(x, dtype=np.float64))
	targets: ArrayType = np.asarray(target, dtype=np.float64)

	def evaluate() -> Tensor:
		rng: np.random.Generator = np.random.default_rng(seed)
		return loss(precise.forward(inputs, training=training, rng=rng), targets)

	def objective() -> float:
		with noGrad():
			return float(evaluate().data)

	evaluate().backward()
	errors: dict[str, float] = {}
	for name in names if names is not None else list(precise.parameters):
		tensor: Tensor = precise.parameters[name]
		analytic: ArrayType = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
		errors[name] = relativeError(analytic, _numericGradient(objective, tensor.data, h))
	report = GradCheckReport(errors, tolerance)
	logger.debug(f"Model gradient check: max error {report.maxError:.3e} at {report.worst}.")
	return report
