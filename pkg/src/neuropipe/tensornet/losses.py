"""Segmentation cost functions."""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
from collections.abc import Callable

# Third-party Modules:
import numpy as np

# Local Modules:
from ..errors import InvariantViolationError, ShapeMismatchError
from .tensor import ArrayType, Tensor, record


DICE_SMOOTH: float = 1.0
CROSSENTROPY_EPSILON: float = 1e-7


LossType = Callable[[Tensor, ArrayType], Tensor]


def _requireSameShape(prediction: Tensor, target: ArrayType) -> ArrayType:
	target = np.asarray(target, dtype=prediction.dtype)
	if target.shape != prediction.shape:
		raise ShapeMismatchError(
			"Target does not match the prediction", expected=prediction.shape, got=target.shape
		)
	return target


def softDice(prediction: Tensor, target: ArrayType, smooth: float = DICE_SMOOTH) -> Tensor:
	"""
	Computes the soft dice loss.

	Per sample, `1 - (2 * sum(p * t) + smooth) / (sum(p) + sum(t) + smooth)`, summed over every voxel
	and channel, then averaged over the batch.

	Args:
		prediction: Probabilities, `[batch, ...]`.
		target: The binary target with the prediction's shape.
		smooth: Added to the numerator and the denominator.

	Returns:
		The single element loss tensor.

	Raises:
		ShapeMismatchError: The shapes differ.
	"""
	target = _requireSameShape(prediction, target)
	batch: int = prediction.shape[0]
	axes: tuple[int, ...] = tuple(range(1, prediction.ndim))
	smoothing = prediction.dtype.type(smooth)
	numerator: ArrayType = 2 * (prediction.data * target).sum(axis=axes) + smoothing
	denominator: ArrayType = prediction.data.sum(axis=axes) + target.sum(axis=axes) + smoothing
	loss: ArrayType = np.asarray((1 - numerator / denominator).mean(), dtype=prediction.dtype)
	broadcast: tuple[int, ...] = (batch,) + (1,) * (prediction.ndim - 1)

	def backward(grad: ArrayType) -> tuple[ArrayType]:
		num: ArrayType = numerator.reshape(broadcast)
		den: ArrayType = denominator.reshape(broadcast)
		return (-grad * (2 * target * den - num) / (den * den) / batch,)

	return record(loss, [prediction], backward)


def binaryCrossentropy(
	prediction: Tensor, target: ArrayType, epsilon: float = CROSSENTROPY_EPSILON
) -> Tensor:
	"""
	Computes the mean binary cross-entropy.

	Probabilities are clipped to `[epsilon, 1 - epsilon]`; clipped elements receive no gradient.

	Args:
		prediction: Probabilities, `[batch, ...]`.
		target: The binary target with the prediction's shape.
		epsilon: The clipping margin.

	Returns:
		The single element loss tensor.

	Raises:
		ShapeMismatchError: The shapes differ.
	"""
	target = _requireSameShape(prediction, target)
	low = prediction.dtype.type(epsilon)
	clipped: ArrayType = np.clip(prediction.data, low, 1 - low)
	count: int = prediction.data.size
	losses: ArrayType = -(target * np.log(clipped) + (1 - target) * np.log(1 - clipped))
	loss: ArrayType = np.asarray(losses.mean(), dtype=prediction.dtype)
	inside: ArrayType = (prediction.data > low) & (prediction.data < 1 - low)

	def backward(grad: ArrayType) -> tuple[ArrayType]:
		local: ArrayType = (-target / clipped + (1 - target) / (1 - clipped)) / count
		return (grad * np.where(inside, local, 0).astype(prediction.dtype),)

	return record(loss, [prediction], backward)


LOSSES: dict[str, LossType] = {
	"soft_dice": softDice,
	"binary_crossentropy": binaryCrossentropy,
}


def lossFunction(name: str) -> LossType:
	"""
	Looks up a cost function.

	Args:
		name: soft_dice or binary_crossentropy.

	Returns:
		The loss function.
	"""
	try:
		return LOSSES[name]
	except KeyError:
		raise InvariantViolationError(
			f"Unknown cost function {name!r}; expected one of {sorted(LOSSES)}."
		) from None
