"""
Reverse-mode automatic differentiation.

A `Tensor` wraps a numpy array. Operations that receive at least one tensor requiring a gradient
record their inputs and a backward function, forming a tape that `Tensor.backward` walks in
reverse topological order. Recording can be switched off per thread with `noGrad`, which is how
inference runs concurrently against a shared model.
"""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from typing import Any, Optional

# Third-party Modules:
import numpy as np

# Local Modules:
from ..errors import ShapeMismatchError
from ..typedef import ShapeType


ArrayType = np.ndarray[Any, Any]
BackwardType = Callable[[ArrayType], Sequence[Optional[ArrayType]]]


class _GradState(threading.local):
	enabled: bool = True


_gradState: _GradState = _GradState()


def isGradEnabled() -> bool:
	"""Determines whether operations on this thread record a tape."""
	return _gradState.enabled


@contextmanager
def noGrad() -> Iterator[None]:
	"""Disables tape recording on the current thread for the duration of the block."""
	previous: bool = _gradState.enabled
	_gradState.enabled = False
	try:
		yield
	finally:
		_gradState.enabled = previous


class Tensor:
	"""An array with an optional gradient and the operation that produced it."""

	def __init__(
		self,
		data: Any,
		*,
		requiresGrad: bool = False,
		parents: Sequence[Tensor] = (),
		backwardFunction: Optional[BackwardType] = None,
	) -> None:
		"""
		Defines the constructor.

		Args:
			data: The array data. Non floating point data is converted to float32.
			requiresGrad: True if a gradient should be accumulated for this tensor.
			parents: The tensors this tensor was computed from.
			backwardFunction: Maps the gradient of this tensor to the gradients of the parents.
		"""
		array: ArrayType = np.asarray(data)
		if not np.issubdtype(array.dtype, np.floating):
			array = array.astype(np.float32)
		self.data: ArrayType = array
		self.requiresGrad: bool = requiresGrad
		self.grad: Optional[ArrayType] = None
		self.parents: tuple[Tensor, ...] = tuple(parents)
		self.backwardFunction: Optional[BackwardType] = backwardFunction

	def __repr__(self) -> str:
		return f"Tensor(shape={self.shape}, dtype={self.dtype}, requiresGrad={self.requiresGrad})"

	@property
	def shape(self) -> ShapeType:
		"""The array shape."""
		return tuple(self.data.shape)

	@property
	def ndim(self) -> int:
		"""The number of dimensions."""
		return int(self.data.ndim)

	@property
	def dtype(self) -> np.dtype[Any]:
		"""The element type."""
		return self.data.dtype

	@property
	def isLeaf(self) -> bool:
		"""True if this tensor was not produced by a recorded operation."""
		return self.backwardFunction is None

	def numpy(self) -> ArrayType:
		"""Returns the underlying array."""
		return self.data

	def detach(self) -> Tensor:
		"""Returns a tensor sharing the data without any tape."""
		return Tensor(self.data)

	def zeroGrad(self) -> None:
		"""Clears the accumulated gradient."""
		self.grad = None

	def _topologicalOrder(self) -> list[Tensor]:
		order: list[Tensor] = []
		visited: set[int] = set()
		stack: list[tuple[Tensor, bool]] = [(self, False)]
		while stack:
			node, expanded = stack.pop()
			if expanded:
				order.append(node)
				continue
			if id(node) in visited:
				continue
			visited.add(id(node))
			stack.append((node, True))
			for parent in node.parents:
				if parent.requiresGrad and id(parent) not in visited:
					stack.append((parent, False))
		return order

	def backward(self, grad: Optional[Any] = None) -> None:
		"""
		Accumulates gradients into every leaf tensor that requires one.

		Args:
			grad: The gradient of the final objective with respect to this tensor.
				May be omitted for single element tensors, in which case it is 1.

		Raises:
			ShapeMismatchError: The gradient shape differs from the tensor shape,
				or no gradient was given for a tensor with more than one element.
		"""
		if not self.requiresGrad:
			return
		if grad is None:
			if self.data.size != 1:
				raise ShapeMismatchError("Implicit gradients need a single element tensor", got=self.shape)
			seed: ArrayType = np.ones_like(self.data)
		else:
			seed = np.asarray(grad, dtype=self.dtype)
			if seed.shape != self.data.shape:
				raise ShapeMismatchError(
					"Gradient shape differs from the tensor", expected=self.shape, got=seed.shape
				)
		grads: dict[int, ArrayType] = {id(self): seed}
		for node in reversed(self._topologicalOrder()):
			current: Optional[ArrayType] = grads.pop(id(node), None)
			if current is None:
				continue
			if node.isLeaf:
				node.grad = current.copy() if node.grad is None else node.grad + current
				continue
			assert node.backwardFunction is not None
			for parent, parentGrad in zip(node.parents, node.backwardFunction(current)):
				if parentGrad is None or not parent.requiresGrad:
					continue
				if id(parent) in grads:
					grads[id(parent)] = grads[id(parent)] + parentGrad
				else:
					grads[id(parent)] = parentGrad


def parameter(data: Any, dtype: Any = np.float32) -> Tensor:
	"""
	Creates a trainable leaf tensor.

	Args:
		data: The initial value.
		dtype: The element type.

	Returns:
		The tensor.
	"""
	return Tensor(np.array(data, dtype=dtype), requiresGrad=True)


def record(data: ArrayType, parents: Sequence[Tensor], backwardFunction: BackwardType) -> Tensor:
	"""
	Wraps the result of an operation, recording it on the tape when needed.

	Args:
		data: The result array.
		parents: The operation inputs.
		backwardFunction: Maps the result gradient to one gradient (or None) per parent.

	Returns:
		The result tensor.
	"""
	if isGradEnabled() and any(parent.requiresGrad for parent in parents):
		return Tensor(data, requiresGrad=True, parents=parents, backwardFunction=backwardFunction)
	return Tensor(data)
