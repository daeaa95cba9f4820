"""Gradient descent optimizers."""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
from abc import ABC, abstractmethod
from collections.abc import Mapping

# Third-party Modules:
import numpy as np

# Local Modules:
from ..errors import InvariantViolationError
from ..typedef import JSONMappingType, JSONObjectType
from .tensor import ArrayType, Tensor


class Optimizer(ABC):
	"""Implements the base class for optimizers."""

	name: str = ""

	def __init__(self, learningRate: float) -> None:
		"""
		Defines the constructor.

		Args:
			learningRate: The step size.
		"""
		if learningRate < 0:
			raise InvariantViolationError(f"Learning rate must not be negative, not {learningRate}.")
		self.learningRate: float = learningRate

	@abstractmethod
	def step(self, parameters: Mapping[str, Tensor]) -> None:
		"""
		Updates parameters in place from their accumulated gradients.

		Parameters without a gradient are left untouched.

		Args:
			parameters: The parameters by name.
		"""

	def stateScalars(self) -> JSONObjectType:
		"""Returns the JSON-compatible part of the optimizer state."""
		return {"name": self.name, "learning_rate": self.learningRate}

	def stateArrays(self) -> dict[str, ArrayType]:
		"""Returns the array part of the optimizer state by name."""
		return {}

	def loadState(self, scalars: JSONMappingType, arrays: Mapping[str, ArrayType]) -> None:
		"""
		Restores a state saved by `stateScalars` and `stateArrays`.

		Args:
			scalars: The JSON-compatible state.
			arrays: The array state.
		"""


class SGD(Optimizer):
	"""Plain stochastic gradient descent."""

	name: str = "sgd"

	def step(self, parameters: Mapping[str, Tensor]) -> None:  # NOQA: D102
		for tensor in parameters.values():
			if tensor.grad is not None:
				tensor.data -= tensor.dtype.type(self.learningRate) * tensor.grad


class Adam(Optimizer):
	"""Adam with bias-corrected moment estimates."""

	name: str = "adam"

	def __init__(
		self, learningRate: float, *, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8
	) -> None:
		"""
		Defines the constructor.

		Args:
			learningRate: The step size.
			beta1: The decay of the first moment estimate.
			beta2: The decay of the second moment estimate.
			epsilon: Added to the denominator.
		"""
		super().__init__(learningRate)
		self.beta1: float = beta1
		self.beta2: float = beta2
		self.epsilon: float = epsilon
		self.iterations: int = 0
		self.firstMoments: dict[str, ArrayType] = {}
		self.secondMoments: dict[str, ArrayType] = {}

	def step(self, parameters: Mapping[str, Tensor]) -> None:  # NOQA: D102
		self.iterations += 1
		firstCorrection: float = 1 - self.beta1**self.iterations
		secondCorrection: float = 1 - self.beta2**self.iterations
		for name, tensor in parameters.items():
			grad = tensor.grad
			if grad is None:
				continue
			cast = tensor.dtype.type
			first: ArrayType = self.firstMoments.get(name, np.zeros_like(tensor.data))
			second: ArrayType = self.secondMoments.get(name, np.zeros_like(tensor.data))
			first = cast(self.beta1) * first + cast(1 - self.beta1) * grad
			second = cast(self.beta2) * second + cast(1 - self.beta2) * grad * grad
			self.firstMoments[name] = first
			self.secondMoments[name] = second
			corrected: ArrayType = (first / cast(firstCorrection)) / (
				np.sqrt(second / cast(secondCorrection)) + cast(self.epsilon)
			)
			tensor.data -= cast(self.learningRate) * corrected

	def stateScalars(self) -> JSONObjectType:  # NOQA: D102
		return {
			**super().stateScalars(),
			"beta1": self.beta1,
			"beta2": self.beta2,
			"epsilon": self.epsilon,
			"iterations": self.iterations,
		}

	def stateArrays(self) -> dict[str, ArrayType]:  # NOQA: D102
		arrays: dict[str, ArrayType] = {f"m/{name}": value for name, value in self.firstMoments.items()}
		arrays.update({f"v/{name}": value for name, value in self.secondMoments.items()})
		return arrays

	def loadState(self, scalars: JSONMappingType, arrays: Mapping[str, ArrayType]) -> None:  # NOQA: D102
		self.iterations = int(scalars.get("iterations", 0))
		self.firstMoments = {key[2:]: value for key, value in arrays.items() if key.startswith("m/")}
		self.secondMoments = {key[2:]: value for key, value in arrays.items() if key.startswith("v/")}


OPTIMIZERS: dict[str, type[Optimizer]] = {"adam": Adam, "sgd": SGD}


def optimizerFromName(name: str, learningRate: float) -> Optimizer:
	"""
	Creates an optimizer.

	Args:
		name: adam or sgd.
		learningRate: The step size.

	Returns:
		The optimizer.
	"""
	if name not in OPTIMIZERS:
		raise InvariantViolationError(f"Unknown optimizer {name!r}; expected one of {sorted(OPTIMIZERS)}.")
	return OPTIMIZERS[name](learningRate)
