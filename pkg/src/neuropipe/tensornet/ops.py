"""
Differentiable layer operations.

Every operation works on channels-last arrays of shape `[batch, *spatial, channels]` with any
number of spatial axes, and keeps the floating point type of its inputs so the same code runs in
float32 for training and in float64 for gradient checking.
"""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import math
from collections.abc import Sequence
from typing import Optional, Union

# Third-party Modules:
import numpy as np
from scipy.special import expit

# Local Modules:
from ..errors import InvariantViolationError, ShapeMismatchError
from ..typedef import ShapeType
from .tensor import ArrayType, Tensor, record


LEAKY_RELU_SLOPE: float = 0.2
ELU_ALPHA: float = 1.0
ACTIVATIONS: frozenset[str] = frozenset(
	("relu", "leaky_relu", "elu", "sigmoid", "tanh", "softmax", "linear")
)
PADDINGS: frozenset[str] = frozenset(("same", "valid"))


def _perAxis(value: Union[int, Sequence[int]], ndim: int, name: str) -> ShapeType:
	values: ShapeType = (int(value),) * ndim if isinstance(value, int) else tuple(int(i) for i in value)
	if len(values) != ndim or any(i < 1 for i in values):
		raise InvariantViolationError(f"{name} must be {ndim} positive integers, not {value!r}.")
	return values


def convGeometry(
	spatialShape: ShapeType, kernelShape: ShapeType, strides: ShapeType, padding: str
) -> tuple[ShapeType, tuple[tuple[int, int], ...]]:
	"""
	Computes the output shape and zero padding of a convolution or pooling window.

	Args:
		spatialShape: The input spatial shape.
		kernelShape: The window size per axis.
		strides: The stride per axis.
		padding: "same" for ceil(input / stride) outputs or "valid" for windows inside the input.

	Returns:
		The output spatial shape and the (before, after) padding per axis.

	Raises:
		ShapeMismatchError: A valid window does not fit in the input.
	"""
	if padding not in PADDINGS:
		raise InvariantViolationError(f"Unknown padding {padding!r}.")
	outShape: list[int] = []
	pads: list[tuple[int, int]] = []
	for extent, kernel, stride in zip(spatialShape, kernelShape, strides):
		if padding == "same":
			out: int = math.ceil(extent / stride)
			total: int = max((out - 1) * stride + kernel - extent, 0)
			pads.append((total // 2, total - total // 2))
		else:
			if kernel > extent:
				raise ShapeMismatchError(
					"Window is larger than the input", expected=kernelShape, got=spatialShape
				)
			out = (extent - kernel) // stride + 1
			pads.append((0, 0))
		outShape.append(out)
	return tuple(outShape), tuple(pads)


def _windows(
	kernelShape: ShapeType, strides: ShapeType, outShape: ShapeType
) -> list[tuple[tuple[int, ...], tuple[slice, ...]]]:
	windows: list[tuple[tuple[int, ...], tuple[slice, ...]]] = []
	for offset in np.ndindex(*kernelShape):
		spatial: tuple[slice, ...] = tuple(
			slice(start, start + stride * (count - 1) + 1, stride)
			for start, stride, count in zip(offset, strides, outShape)
		)
		windows.append((offset, (slice(None), *spatial, slice(None))))
	return windows


def _unpad(pads: Sequence[tuple[int, int]], shape: ShapeType) -> tuple[slice, ...]:
	return (
		slice(None),
		*(slice(before, extent - after) for (before, after), extent in zip(pads, shape[1:-1])),
		slice(None),
	)


def conv(
	x: Tensor,
	kernel: Tensor,
	bias: Optional[Tensor] = None,
	*,
	strides: Union[int, Sequence[int]] = 1,
	padding: str = "same",
) -> Tensor:
	"""
	Computes a direct N-dimensional cross-correlation.

	Args:
		x: The input, `[batch, *spatial, inChannels]`.
		kernel: The weights, `[*kernelShape, inChannels, outChannels]`.
		bias: The bias, `[outChannels]`, or None.
		strides: The stride per spatial axis.
		padding: "same" or "valid".

	Returns:
		The output, `[batch, *outSpatial, outChannels]`.

	Raises:
		ShapeMismatchError: The kernel does not match the input.
		InvariantViolationError: Same padding was requested with an even kernel extent.
	"""
	spatialDims: int = x.ndim - 2
	if kernel.ndim != spatialDims + 2 or kernel.shape[-2] != x.shape[-1]:
		raise ShapeMismatchError("Kernel does not fit the input", expected=x.shape, got=kernel.shape)
	if bias is not None and bias.shape != (kernel.shape[-1],):
		raise ShapeMismatchError("Bias does not fit the kernel", expected=kernel.shape[-1:], got=bias.shape)
	kernelShape: ShapeType = kernel.shape[:-2]
	if padding == "same" and any(extent % 2 == 0 for extent in kernelShape):
		raise InvariantViolationError(f"Same padding needs odd kernel extents, got {kernelShape}.")
	strideShape: ShapeType = _perAxis(strides, spatialDims, "strides")
	outShape, pads = convGeometry(x.shape[1:-1], kernelShape, strideShape, padding)
	padded: ArrayType = np.pad(x.data, ((0, 0), *pads, (0, 0)))
	weights: ArrayType = kernel.data
	windows = _windows(kernelShape, strideShape, outShape)
	dtype = np.result_type(x.dtype, kernel.dtype)
	out: ArrayType = np.zeros((x.shape[0], *outShape, kernel.shape[-1]), dtype=dtype)
	for offset, window in windows:
		out += padded[window] @ weights[offset]
	if bias is not None:
		out += bias.data

	def backward(grad: ArrayType) -> tuple[Optional[ArrayType], ...]:
		gradPadded: Optional[ArrayType] = np.zeros_like(padded) if x.requiresGrad else None
		gradKernel: ArrayType = np.zeros_like(weights)
		summed: tuple[int, ...] = tuple(range(spatialDims + 1))
		for offset, window in windows:
			if kernel.requiresGrad:
				gradKernel[offset] = np.tensordot(padded[window], grad, axes=(summed, summed))
			if gradPadded is not None:
				gradPadded[window] += grad @ weights[offset].T
		gradInput: Optional[ArrayType] = None
		if gradPadded is not None:
			gradInput = gradPadded[_unpad(pads, padded.shape)]
		gradBias: Optional[ArrayType] = grad.sum(axis=summed) if bias is not None else None
		return gradInput, gradKernel, gradBias

	parents: list[Tensor] = [x, kernel] if bias is None else [x, kernel, bias]
	return record(out, parents, backward)


def maxPool(
	x: Tensor,
	poolSize: Union[int, Sequence[int]],
	*,
	strides: Optional[Union[int, Sequence[int]]] = None,
	padding: str = "valid",
) -> Tensor:
	"""
	Takes the maximum over sliding windows.

	Ties route the gradient to the first maximal position in window order.

	Args:
		x: The input, `[batch, *spatial, channels]`.
		poolSize: The window size per spatial axis.
		strides: The stride per spatial axis. Defaults to the window size.
		padding: "valid", or "same" to pad with negative infinity.

	Returns:
		The pooled tensor.
	"""
	spatialDims: int = x.ndim - 2
	windowShape: ShapeType = _perAxis(poolSize, spatialDims, "poolSize")
	strideShape: ShapeType = _perAxis(windowShape if strides is None else strides, spatialDims, "strides")
	outShape, pads = convGeometry(x.shape[1:-1], windowShape, strideShape, padding)
	padded: ArrayType = np.pad(x.data, ((0, 0), *pads, (0, 0)), constant_values=-np.inf)
	windows = _windows(windowShape, strideShape, outShape)
	out: ArrayType = padded[windows[0][1]].copy()
	winner: ArrayType = np.zeros(out.shape, dtype=np.int64)
	for index, (_, window) in enumerate(windows[1:], start=1):
		candidate: ArrayType = padded[window]
		better: ArrayType = candidate > out
		out = np.where(better, candidate, out)
		winner[better] = index

	def backward(grad: ArrayType) -> tuple[ArrayType]:
		gradPadded: ArrayType = np.zeros_like(padded)
		for index, (_, window) in enumerate(windows):
			gradPadded[window] += np.where(winner == index, grad, 0)
		return (gradPadded[_unpad(pads, padded.shape)],)

	return record(out, [x], backward)


def upsampleNearest(x: Tensor, factors: Union[int, Sequence[int]]) -> Tensor:
	"""
	Repeats every voxel along each spatial axis.

	Args:
		x: The input, `[batch, *spatial, channels]`.
		factors: The repeat count per spatial axis.

	Returns:
		The upsampled tensor.
	"""
	spatialDims: int = x.ndim - 2
	factorShape: ShapeType = _perAxis(factors, spatialDims, "factors")
	out: ArrayType = x.data
	for axis, factor in enumerate(factorShape, start=1):
		if factor > 1:
			out = np.repeat(out, factor, axis=axis)

	def backward(grad: ArrayType) -> tuple[ArrayType]:
		split: list[int] = [grad.shape[0]]
		for extent, factor in zip(x.shape[1:-1], factorShape):
			split.extend((extent, factor))
		split.append(grad.shape[-1])
		return (grad.reshape(split).sum(axis=tuple(range(2, 2 * spatialDims + 1, 2))),)

	return record(out, [x], backward)


def concat(tensors: Sequence[Tensor]) -> Tensor:
	"""
	Concatenates tensors along the channel axis.

	Args:
		tensors: Tensors with equal batch and spatial shapes.

	Returns:
		The concatenated tensor.

	Raises:
		ShapeMismatchError: The leading shapes differ.
	"""
	leading: set[ShapeType] = {tensor.shape[:-1] for tensor in tensors}
	if len(leading) != 1:
		raise ShapeMismatchError(f"Cannot concatenate shapes {[tensor.shape for tensor in tensors]}")
	out: ArrayType = np.concatenate([tensor.data for tensor in tensors], axis=-1)
	bounds: list[int] = np.cumsum([tensor.shape[-1] for tensor in tensors]).tolist()

	def backward(grad: ArrayType) -> list[ArrayType]:
		return np.split(grad, bounds[:-1], axis=-1)

	return record(out, tensors, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
	"""
	Adds two tensors of equal shape.

	Raises:
		ShapeMismatchError: The shapes differ.
	"""
	if a.shape != b.shape:
		raise ShapeMismatchError("Cannot add tensors", expected=a.shape, got=b.shape)

	def backward(grad: ArrayType) -> tuple[ArrayType, ArrayType]:
		return grad, grad

	return record(a.data + b.data, [a, b], backward)


def scale(x: Tensor, gate: Tensor) -> Tensor:
	"""
	Multiplies every channel by a per-sample gate.

	Args:
		x: The input, `[batch, *spatial, channels]`.
		gate: The gate, `[batch, channels]`.

	Returns:
		The gated tensor.
	"""
	if gate.shape != (x.shape[0], x.shape[-1]):
		raise ShapeMismatchError(
			"Gate does not fit the input", expected=(x.shape[0], x.shape[-1]), got=gate.shape
		)
	broadcast: ShapeType = (x.shape[0],) + (1,) * (x.ndim - 2) + (x.shape[-1],)
	factors: ArrayType = gate.data.reshape(broadcast)
	spatialAxes: tuple[int, ...] = tuple(range(1, x.ndim - 1))

	def backward(grad: ArrayType) -> tuple[ArrayType, ArrayType]:
		return grad * factors, (grad * x.data).sum(axis=spatialAxes)

	return record(x.data * factors, [x, gate], backward)


def batchNorm(
	x: Tensor,
	gamma: Tensor,
	beta: Tensor,
	movingMean: ArrayType,
	movingVariance: ArrayType,
	*,
	training: bool,
	momentum: float = 0.99,
	epsilon: float = 1e-3,
) -> Tensor:
	"""
	Normalizes every channel.

	In training mode the batch statistics are used and the moving statistics are updated in place
	as `moving = momentum * moving + (1 - momentum) * batch`. Otherwise the moving statistics are
	used and left untouched.

	Args:
		x: The input, `[batch, *spatial, channels]`.
		gamma: The per-channel scale.
		beta: The per-channel offset.
		movingMean: The moving mean, updated in training mode.
		movingVariance: The moving variance, updated in training mode.
		training: Whether to use and update batch statistics.
		momentum: The moving average momentum.
		epsilon: Added to the variance.

	Returns:
		The normalized tensor.
	"""
	axes: tuple[int, ...] = tuple(range(x.ndim - 1))
	if training:
		mean: ArrayType = x.data.mean(axis=axes)
		variance: ArrayType = x.data.var(axis=axes)
		movingMean *= momentum
		movingMean += (1 - momentum) * mean.astype(movingMean.dtype)
		movingVariance *= momentum
		movingVariance += (1 - momentum) * variance.astype(movingVariance.dtype)
	else:
		mean = movingMean.astype(x.dtype)
		variance = movingVariance.astype(x.dtype)
	inverse: ArrayType = 1 / np.sqrt(variance + x.dtype.type(epsilon))
	normalized: ArrayType = (x.data - mean) * inverse
	count: int = int(np.prod([x.shape[axis] for axis in axes]))

	def backward(grad: ArrayType) -> tuple[ArrayType, ArrayType, ArrayType]:
		gradNormalized: ArrayType = grad * gamma.data
		if training:
			gradInput: ArrayType = (
				inverse
				/ count
				* (
					count * gradNormalized
					- gradNormalized.sum(axis=axes)
					- normalized * (gradNormalized * normalized).sum(axis=axes)
				)
			)
		else:
			gradInput = gradNormalized * inverse
		return gradInput, (grad * normalized).sum(axis=axes), grad.sum(axis=axes)

	return record(normalized * gamma.data + beta.data, [x, gamma, beta], backward)


def activation(x: Tensor, name: str) -> Tensor:  # NOQA: C901
	"""
	Applies a pointwise nonlinearity, or softmax over the channel axis.

	Args:
		x: The input.
		name: One of relu, leaky_relu, elu, sigmoid, tanh, softmax or linear.

	Returns:
		The activated tensor.
	"""
	data: ArrayType = x.data
	out: ArrayType
	if name == "relu":
		out = np.maximum(data, 0)
	elif name == "leaky_relu":
		out = np.where(data > 0, data, data * data.dtype.type(LEAKY_RELU_SLOPE))
	elif name == "elu":
		out = np.where(data > 0, data, ELU_ALPHA * np.expm1(np.minimum(data, 0))).astype(data.dtype)
	elif name == "sigmoid":
		out = expit(data)
	elif name == "tanh":
		out = np.tanh(data)
	elif name == "softmax":
		shifted: ArrayType = np.exp(data - data.max(axis=-1, keepdims=True))
		out = shifted / shifted.sum(axis=-1, keepdims=True)
	elif name == "linear":
		out = data
	else:
		raise InvariantViolationError(f"Unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}.")

	def backward(grad: ArrayType) -> tuple[ArrayType]:
		if name == "relu":
			return (grad * (data > 0),)
		if name == "leaky_relu":
			return (grad * np.where(data > 0, 1, data.dtype.type(LEAKY_RELU_SLOPE)),)
		if name == "elu":
			return (grad * np.where(data > 0, 1, out + ELU_ALPHA),)
		if name == "sigmoid":
			return (grad * out * (1 - out),)
		if name == "tanh":
			return (grad * (1 - out * out),)
		if name == "softmax":
			return (out * (grad - (grad * out).sum(axis=-1, keepdims=True)),)
		return (grad,)

	return record(out, [x], backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], *, training: bool) -> Tensor:
	"""
	Zeroes random elements and rescales the rest by 1 / (1 - rate).

	Args:
		x: The input.
		rate: The probability of zeroing an element.
		rng: The random generator. Required in training mode when rate > 0.
		training: Dropout is the identity outside training.

	Returns:
		The tensor.
	"""
	if not training or rate <= 0:
		return x
	if rng is None:
		raise InvariantViolationError("Dropout in training mode needs a random generator.")
	keep: ArrayType = (rng.random(x.shape) >= rate) / x.dtype.type(1 - rate)
	keep = keep.astype(x.dtype)

	def backward(grad: ArrayType) -> tuple[ArrayType]:
		return (grad * keep,)

	return record(x.data * keep, [x], backward)


def dense(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
	"""
	Applies a fully connected layer.

	Args:
		x: The input, `[batch, features]`.
		kernel: The weights, `[features, outputs]`.
		bias: The bias, `[outputs]`, or None.

	Returns:
		The output, `[batch, outputs]`.
	"""
	if x.ndim != 2 or kernel.ndim != 2 or kernel.shape[0] != x.shape[1]:
		raise ShapeMismatchError("Dense kernel does not fit the input", expected=x.shape, got=kernel.shape)
	out: ArrayType = x.data @ kernel.data
	if bias is not None:
		out = out + bias.data

	def backward(grad: ArrayType) -> tuple[Optional[ArrayType], ...]:
		gradBias: Optional[ArrayType] = grad.sum(axis=0) if bias is not None else None
		return grad @ kernel.data.T, x.data.T @ grad, gradBias

	parents: list[Tensor] = [x, kernel] if bias is None else [x, kernel, bias]
	return record(out, parents, backward)


def globalPool(x: Tensor) -> Tensor:
	"""
	Averages over every spatial axis.

	Args:
		x: The input, `[batch, *spatial, channels]`.

	Returns:
		The pooled tensor, `[batch, channels]`.
	"""
	spatialAxes: tuple[int, ...] = tuple(range(1, x.ndim - 1))
	count: int = int(np.prod(x.shape[1:-1]))
	broadcast: ShapeType = (x.shape[0],) + (1,) * (x.ndim - 2) + (x.shape[-1],)

	def backward(grad: ArrayType) -> tuple[ArrayType]:
		return (np.broadcast_to(grad.reshape(broadcast) / count, x.shape).astype(x.dtype),)

	return record(x.data.mean(axis=spatialAxes), [x], backward)


def project(x: Tensor, weights: ArrayType) -> Tensor:
	"""
	Reduces a tensor to a scalar by a weighted sum.

	Args:
		x: The input.
		weights: Constant weights with the input's shape.

	Returns:
		The single element tensor.
	"""
	weights = np.asarray(weights, dtype=x.dtype)
	if weights.shape != x.shape:
		raise ShapeMismatchError(
			"Projection weights do not fit the input", expected=x.shape, got=weights.shape
		)

	def backward(grad: ArrayType) -> tuple[ArrayType]:
		return (grad * weights,)

	return record(np.asarray((x.data * weights).sum(), dtype=x.dtype), [x], backward)
