"""Layer graphs and their parameters."""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import copy
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

# Third-party Modules:
import numpy as np

# Local Modules:
from ..errors import InvariantViolationError, ShapeMismatchError
from ..typedef import JSONMappingType, JSONObjectType, ShapeType
from . import ops
from .tensor import ArrayType, Tensor, noGrad


logger: logging.Logger = logging.getLogger(__name__)


class LayerKind(str, Enum):
	"""The operation a layer performs; values are the names used in model files."""

	INPUT = "input"
	CONV = "conv"
	POOL_MAX = "pool_max"
	UPSAMPLE_NN = "upsample_nn"
	CONCAT = "concat"
	ADD = "add"
	BATCH_NORM = "batch_norm"
	ACTIVATION = "activation"
	DROPOUT = "dropout"
	DENSE = "dense"
	GLOBAL_POOL = "global_pool"
	SCALE = "scale"


ROLES: frozenset[str] = frozenset(("block", "auxiliary", "head"))
INPUT_ARITY: dict[LayerKind, Optional[int]] = {
	LayerKind.INPUT: 0,
	LayerKind.CONCAT: None,
	LayerKind.ADD: 2,
	LayerKind.SCALE: 2,
}


@dataclass(frozen=True)
class LayerNode:
	"""One operation in a model graph."""

	name: str
	kind: LayerKind
	inputs: tuple[str, ...] = ()
	params: Mapping[str, Any] = field(default_factory=dict)
	role: Optional[str] = None
	"""For convolutions, block (main path), auxiliary (helper paths) or head (output projection)."""

	def __post_init__(self) -> None:
		"""
		Performs additional processing after dataclass initialization.

		Raises:
			InvariantViolationError: The node is malformed.
		"""
		object.__setattr__(self, "kind", LayerKind(self.kind))
		object.__setattr__(self, "inputs", tuple(self.inputs))
		object.__setattr__(self, "params", dict(self.params))
		arity: Optional[int] = INPUT_ARITY.get(self.kind, 1)
		if arity is not None and len(self.inputs) != arity:
			raise InvariantViolationError(
				f"Layer {self.name!r} takes {arity} inputs, not {len(self.inputs)}."
			)
		if arity is None and not self.inputs:
			raise InvariantViolationError(f"Layer {self.name!r} needs at least one input.")
		if self.role is not None and self.role not in ROLES:
			raise InvariantViolationError(f"Layer {self.name!r} has unknown role {self.role!r}.")

	def toDict(self) -> JSONObjectType:  # NOQA: D102
		result: JSONObjectType = {
			"name": self.name,
			"kind": self.kind.value,
			"inputs": list(self.inputs),
			"params": dict(self.params),
		}
		if self.role is not None:
			result["role"] = self.role
		return result

	@classmethod
	def fromDict(cls, data: JSONMappingType) -> LayerNode:  # NOQA: D102
		return cls(
			str(data["name"]),
			LayerKind(data["kind"]),
			tuple(data.get("inputs", ())),
			dict(data.get("params", {})),
			data.get("role"),
		)


def _heUniform(rng: np.random.Generator, shape: ShapeType, fanIn: int) -> ArrayType:
	limit: float = math.sqrt(6.0 / fanIn)
	return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Model:
	"""
	A directed acyclic graph of layers with named parameters.

	The first node is the input and the last node is the output. Parameters are named
	`<layer>/<kind>`; batch normalization moving statistics are kept apart from the trainable
	parameters as model state.
	"""

	def __init__(
		self,
		nodes: Iterable[LayerNode],
		config: Optional[JSONMappingType] = None,
		*,
		metadata: Optional[JSONMappingType] = None,
	) -> None:
		"""
		Defines the constructor.

		Args:
			nodes: The layers in topological order.
			config: The configuration the graph was built from.
			metadata: Free-form metadata, such as a training summary.

		Raises:
			InvariantViolationError: The graph is malformed.
			ShapeMismatchError: Shapes do not propagate through the graph.
		"""
		self.nodes: tuple[LayerNode, ...] = tuple(nodes)
		self.config: JSONObjectType = dict(config or {})
		self.metadata: JSONObjectType = dict(metadata or {})
		if not self.nodes or self.nodes[0].kind is not LayerKind.INPUT:
			raise InvariantViolationError("The first layer of a model must be its input.")
		self.parameterShapes: dict[str, ShapeType] = {}
		self.stateShapes: dict[str, ShapeType] = {}
		self.shapes: dict[str, ShapeType] = {}
		self._fanIn: dict[str, int] = {}
		for node in self.nodes:
			if node.name in self.shapes:
				raise InvariantViolationError(f"Duplicate layer name {node.name!r}.")
			for name in node.inputs:
				if name not in self.shapes:
					raise InvariantViolationError(f"Layer {node.name!r} uses {name!r} before it is defined.")
			self.shapes[node.name] = self._propagate(node)
		self.parameters: dict[str, Tensor] = {}
		self.state: dict[str, ArrayType] = {}

	def __repr__(self) -> str:
		return f"Model(layers={len(self.nodes)}, input={self.inputShape}, output={self.outputShape})"

	def _propagate(self, node: LayerNode) -> ShapeType:  # NOQA: C901
		shapes: list[ShapeType] = [self.shapes[name] for name in node.inputs]
		params: Mapping[str, Any] = node.params
		if node.kind is LayerKind.INPUT:
			return tuple(int(i) for i in params["shape"])
		shape: ShapeType = shapes[0]
		spatialDims: int = len(shape) - 1
		if node.kind is LayerKind.CONV:
			kernel: ShapeType = tuple(params["kernel_size"])
			if len(kernel) != spatialDims:
				raise ShapeMismatchError(
					f"Kernel of {node.name!r} does not fit", expected=spatialDims, got=kernel
				)
			strides: ShapeType = tuple(params.get("strides", (1,) * spatialDims))
			outShape, _ = ops.convGeometry(shape[:-1], kernel, strides, params.get("padding", "same"))
			filters: int = int(params["filters"])
			self.parameterShapes[f"{node.name}/kernel"] = (*kernel, shape[-1], filters)
			if params.get("use_bias", True):
				self.parameterShapes[f"{node.name}/bias"] = (filters,)
			self._fanIn[node.name] = int(np.prod(kernel)) * shape[-1]
			return (*outShape, filters)
		if node.kind is LayerKind.POOL_MAX:
			window: ShapeType = tuple(params["pool_size"])
			poolStrides: ShapeType = tuple(params.get("strides") or window)
			outShape, _ = ops.convGeometry(shape[:-1], window, poolStrides, params.get("padding", "valid"))
			return (*outShape, shape[-1])
		if node.kind is LayerKind.UPSAMPLE_NN:
			factors: ShapeType = tuple(params["size"])
			return (*(extent * factor for extent, factor in zip(shape[:-1], factors)), shape[-1])
		if node.kind is LayerKind.CONCAT:
			if len({item[:-1] for item in shapes}) != 1:
				raise ShapeMismatchError(f"Inputs of {node.name!r} cannot be concatenated: {shapes}")
			return (*shape[:-1], sum(item[-1] for item in shapes))
		if node.kind is LayerKind.ADD:
			if shapes[0] != shapes[1]:
				raise ShapeMismatchError(f"Inputs of {node.name!r} differ", expected=shapes[0], got=shapes[1])
			return shape
		if node.kind is LayerKind.BATCH_NORM:
			for suffix in ("gamma", "beta"):
				self.parameterShapes[f"{node.name}/{suffix}"] = (shape[-1],)
			for suffix in ("moving_mean", "moving_variance"):
				self.stateShapes[f"{node.name}/{suffix}"] = (shape[-1],)
			return shape
		if node.kind is LayerKind.DENSE:
			if len(shape) != 1:
				raise ShapeMismatchError(f"Dense layer {node.name!r} needs a flat input", got=shape)
			units: int = int(params["units"])
			self.parameterShapes[f"{node.name}/kernel"] = (shape[0], units)
			self.parameterShapes[f"{node.name}/bias"] = (units,)
			self._fanIn[node.name] = shape[0]
			return (units,)
		if node.kind is LayerKind.GLOBAL_POOL:
			return (shape[-1],)
		if node.kind is LayerKind.SCALE:
			if shapes[1] != (shape[-1],):
				raise ShapeMismatchError(
					f"Gate of {node.name!r} does not fit", expected=(shape[-1],), got=shapes[1]
				)
			return shape
		return shape

	@property
	def inputShape(self) -> ShapeType:
		"""The per-sample input shape, spatial axes followed by channels."""
		return self.shapes[self.nodes[0].name]

	@property
	def outputShape(self) -> ShapeType:
		"""The per-sample output shape."""
		return self.shapes[self.nodes[-1].name]

	@property
	def numOutputs(self) -> int:
		"""The number of output channels."""
		return self.outputShape[-1]

	@property
	def isInitialized(self) -> bool:
		"""True once every parameter has a value."""
		return set(self.parameters) == set(self.parameterShapes)

	@property
	def dtype(self) -> np.dtype[Any]:
		"""The parameter element type."""
		for tensor in self.parameters.values():
			return tensor.dtype
		return np.dtype(np.float32)

	@property
	def parameterCount(self) -> int:
		"""The number of trainable scalars."""
		return sum(int(np.prod(shape)) for shape in self.parameterShapes.values())

	def countConvolutions(self, role: Optional[str] = "block") -> int:
		"""
		Counts convolution layers.

		Args:
			role: Only count convolutions with this role, or None to count all.

		Returns:
			The number of convolution layers.
		"""
		return sum(
			1 for node in self.nodes if node.kind is LayerKind.CONV and (role is None or node.role == role)
		)

	def initialize(self, seed: int = 0) -> None:
		"""
		Draws fresh parameters.

		Kernels are He-uniform, biases and batch normalization offsets zero, batch normalization
		scales one, moving means zero and moving variances one.

		Args:
			seed: Seeds the generator; parameters are drawn in layer order.
		"""
		rng: np.random.Generator = np.random.default_rng(seed)
		parameters: dict[str, ArrayType] = {}
		for name, shape in self.parameterShapes.items():
			layer, kind = name.rsplit("/", 1)
			if kind == "kernel":
				parameters[name] = _heUniform(rng, shape, self._fanIn[layer])
			elif kind == "gamma":
				parameters[name] = np.ones(shape, dtype=np.float32)
			else:
				parameters[name] = np.zeros(shape, dtype=np.float32)
		state: dict[str, ArrayType] = {
			name: (np.ones if name.endswith("variance") else np.zeros)(shape, dtype=np.float32)
			for name, shape in self.stateShapes.items()
		}
		self.setParameters(parameters, state)

	def setParameters(
		self, parameters: Mapping[str, ArrayType], state: Optional[Mapping[str, ArrayType]] = None
	) -> None:
		"""
		Replaces parameter values.

		Args:
			parameters: Values by parameter name. Names not given keep their current value.
			state: Moving statistics by name. Names not given keep their current value.

		Raises:
			InvariantViolationError: A name is unknown.
			ShapeMismatchError: A value has the wrong shape.
		"""
		for values, shapes, target in (
			(parameters, self.parameterShapes, None),
			(state or {}, self.stateShapes, self.state),
		):
			for name, value in values.items():
				if name not in shapes:
					raise InvariantViolationError(f"Unknown parameter {name!r}.")
				array: ArrayType = np.array(value)
				if array.shape != shapes[name]:
					raise ShapeMismatchError(
						f"Parameter {name!r} has the wrong shape", expected=shapes[name], got=array.shape
					)
				if target is None:
					self.parameters[name] = Tensor(array, requiresGrad=True)
				else:
					target[name] = array

	def parameterArrays(self) -> dict[str, ArrayType]:
		"""Returns the parameter values by name."""
		return {name: tensor.data for name, tensor in self.parameters.items()}

	def zeroGrad(self) -> None:
		"""Clears every parameter gradient."""
		for tensor in self.parameters.values():
			tensor.zeroGrad()

	def astype(self, dtype: Any) -> Model:
		"""
		Copies the model with parameters and state of another element type.

		Args:
			dtype: The new element type, such as numpy.float64 for gradient checking.

		Returns:
			The copy.
		"""
		result = Model(self.nodes, self.config, metadata=copy.deepcopy(self.metadata))
		result.setParameters(
			{name: array.astype(dtype) for name, array in self.parameterArrays().items()},
			{name: array.astype(dtype) for name, array in self.state.items()},
		)
		return result

	def copy(self) -> Model:
		"""Copies the model, including parameters and state."""
		return self.astype(self.dtype)

	def forward(  # NOQA: C901
		self, x: Tensor, *, training: bool = False, rng: Optional[np.random.Generator] = None
	) -> Tensor:
		"""
		Evaluates the graph.

		Args:
			x: The input batch, `[batch, *inputShape]`.
			training: Use batch statistics (updating the moving statistics) and dropout.
			rng: The dropout generator, needed in training mode when the model has dropout.

		Returns:
			The output batch.

		Raises:
			ShapeMismatchError: The input does not match the model.
		"""
		if not self.isInitialized:
			raise InvariantViolationError("Model parameters are not initialized.")
		if x.ndim < 2 or x.shape[1:] != self.inputShape:
			raise ShapeMismatchError(
				"Input does not match the model", expected=self.inputShape, got=x.shape[1:]
			)
		values: dict[str, Tensor] = {}
		for node in self.nodes:
			inputs: list[Tensor] = [values[name] for name in node.inputs]
			params: Mapping[str, Any] = node.params
			kind: LayerKind = node.kind
			if kind is LayerKind.INPUT:
				result: Tensor = x
			elif kind is LayerKind.CONV:
				result = ops.conv(
					inputs[0],
					self.parameters[f"{node.name}/kernel"],
					self.parameters.get(f"{node.name}/bias"),
					strides=tuple(params.get("strides", (1,) * (x.ndim - 2))),
					padding=params.get("padding", "same"),
				)
			elif kind is LayerKind.POOL_MAX:
				result = ops.maxPool(
					inputs[0],
					tuple(params["pool_size"]),
					strides=params.get("strides"),
					padding=params.get("padding", "valid"),
				)
			elif kind is LayerKind.UPSAMPLE_NN:
				result = ops.upsampleNearest(inputs[0], tuple(params["size"]))
			elif kind is LayerKind.CONCAT:
				result = ops.concat(inputs)
			elif kind is LayerKind.ADD:
				result = ops.add(inputs[0], inputs[1])
			elif kind is LayerKind.BATCH_NORM:
				result = ops.batchNorm(
					inputs[0],
					self.parameters[f"{node.name}/gamma"],
					self.parameters[f"{node.name}/beta"],
					self.state[f"{node.name}/moving_mean"],
					self.state[f"{node.name}/moving_variance"],
					training=training,
					momentum=float(params.get("momentum", 0.99)),
					epsilon=float(params.get("epsilon", 1e-3)),
				)
			elif kind is LayerKind.ACTIVATION:
				result = ops.activation(inputs[0], str(params["name"]))
			elif kind is LayerKind.DROPOUT:
				result = ops.dropout(inputs[0], float(params["rate"]), rng, training=training)
			elif kind is LayerKind.DENSE:
				result = ops.dense(
					inputs[0], self.parameters[f"{node.name}/kernel"], self.parameters[f"{node.name}/bias"]
				)
			elif kind is LayerKind.GLOBAL_POOL:
				result = ops.globalPool(inputs[0])
			else:
				result = ops.scale(inputs[0], inputs[1])
			values[node.name] = result
		return values[self.nodes[-1].name]

	def predict(self, batch: ArrayType) -> ArrayType:
		"""
		Runs inference without recording a tape.

		Safe to call from several threads at once.

		Args:
			batch: The input batch, `[batch, *inputShape]`.

		Returns:
			The output batch.
		"""
		with noGrad():
			return self.forward(Tensor(np.asarray(batch, dtype=self.dtype)), training=False).data

	def graphSpec(self) -> list[JSONObjectType]:
		"""Returns the layers as JSON-compatible dictionaries."""
		return [node.toDict() for node in self.nodes]

	@classmethod
	def fromGraphSpec(
		cls,
		spec: Sequence[JSONMappingType],
		config: Optional[JSONMappingType] = None,
		*,
		metadata: Optional[JSONMappingType] = None,
	) -> Model:
		"""
		Rebuilds a model graph without parameters.

		Args:
			spec: The layers, as returned by `graphSpec`.
			config: The configuration the graph was built from.
			metadata: Free-form metadata.

		Returns:
			The uninitialized model.
		"""
		return cls((LayerNode.fromDict(item) for item in spec), config, metadata=metadata)
