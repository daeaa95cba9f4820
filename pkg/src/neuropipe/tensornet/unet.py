"""
Configurable 2D and 3D U-Net construction.

The encoder has `depth` stages of two convolution units followed by max pooling, the bottleneck
two units, and the decoder `depth` stages of nearest-neighbor upsampling, concatenation with the
matching encoder stage and two units. A 1x1 convolution projects to the outputs, followed by a
sigmoid for one output or a softmax otherwise.

Encoder stage `d` (counted from the top) has `max_filter / (2 ** (depth - 1 - d) * factor)` filters,
doubling at every stage; the bottleneck has `max_filter / factor`. Decoder stages mirror the
encoder.

Block styles:
- plain: two units in sequence.
- residual: the second unit's output is added to the first unit's output.
- se: two units whose channels are reweighted by a squeeze-and-excitation gate.
- dense: every unit sees the concatenation of the block input and all earlier unit outputs;
	the stack is projected back to the stage's filters by a 1x1 convolution.
- inception: every unit convolves along three parallel paths (1x1, the configured kernel,
	and max pooling followed by 1x1), concatenates them and projects them with a 1x1 convolution.
"""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import logging
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass, fields
from typing import Any, Optional, Union

# Local Modules:
from ..errors import ConfigError
from ..typedef import JSONMappingType, JSONObjectType, ShapeType
from .losses import LOSSES
from .model import LayerKind, LayerNode, Model
from .ops import ACTIVATIONS


BACKENDS: frozenset[str] = frozenset(("tensornet",))
OPTIMIZERS: frozenset[str] = frozenset(("adam", "sgd"))
BLOCK_ORDERS: frozenset[str] = frozenset(("conv_bn_act", "bn_act_conv"))
BLOCK_STYLES: frozenset[str] = frozenset(("plain", "residual", "dense", "se", "inception"))
SE_RATIO: int = 16


logger: logging.Logger = logging.getLogger(__name__)


def _axes(value: Union[int, Sequence[int]], count: int, field: str) -> ShapeType:
	if isinstance(value, bool):
		raise ConfigError(field, f"expected integers, got {value!r}")
	if isinstance(value, int):
		return (value,) * count
	try:
		result: ShapeType = tuple(int(i) for i in value)
	except (TypeError, ValueError):
		raise ConfigError(field, f"expected integers, got {value!r}") from None
	if len(result) != count:
		raise ConfigError(field, f"expected {count} values, got {len(result)}")
	return result


@dataclass(frozen=True)
class UNetConfig:
	"""U-Net hyperparameters; JSON documents use the snake_case form of every field."""

	inputShape: ShapeType
	"""Spatial extents followed by the channel count."""
	depth: int = 4
	maxFilter: int = 512
	downsizeFiltersFactor: int = 1
	poolSize: ShapeType = ()
	"""Per spatial axis; defaults to 2 on every axis."""
	kernelSize: ShapeType = ()
	"""Per spatial axis; defaults to 3 on every axis."""
	stride: ShapeType = ()
	"""Block convolution stride per spatial axis; skip connections only align at 1."""
	dropout: float = 0.0
	batchNorm: bool = True
	activation: str = "relu"
	padding: str = "same"
	numOutputs: int = 1
	costFunction: str = "soft_dice"
	initialLearningRate: float = 1e-5
	optimizer: str = "adam"
	blockOrder: str = "conv_bn_act"
	blockStyle: str = "plain"
	backend: str = "tensornet"
	bnMomentum: float = 0.99
	bnEpsilon: float = 1e-3

	def __post_init__(self) -> None:  # NOQA: C901
		"""
		Performs additional processing after dataclass initialization.

		Raises:
			ConfigError: A field is invalid; the error names it.
		"""
		try:
			shape: ShapeType = tuple(int(i) for i in self.inputShape)
		except (TypeError, ValueError):
			raise ConfigError(
				"input_shape", f"expected a list of integers, got {self.inputShape!r}"
			) from None
		if len(shape) < 3 or any(i < 1 for i in shape):
			raise ConfigError("input_shape", f"expected positive spatial extents and channels, got {shape}")
		object.__setattr__(self, "inputShape", shape)
		spatialDims: int = len(shape) - 1
		object.__setattr__(self, "poolSize", _axes(self.poolSize or 2, spatialDims, "pool_size"))
		object.__setattr__(self, "kernelSize", _axes(self.kernelSize or 3, spatialDims, "kernel_size"))
		object.__setattr__(self, "stride", _axes(self.stride or 1, spatialDims, "stride"))
		if isinstance(self.depth, bool) or not isinstance(self.depth, int) or self.depth < 1:
			raise ConfigError("depth", f"expected an integer >= 1, got {self.depth!r}")
		if any(i < 1 for i in self.poolSize):
			raise ConfigError("pool_size", f"expected positive sizes, got {self.poolSize}")
		if any(i < 1 for i in self.kernelSize):
			raise ConfigError("kernel_size", f"expected positive sizes, got {self.kernelSize}")
		if any(i % 2 == 0 for i in self.kernelSize):
			raise ConfigError("kernel_size", f"same padding needs odd sizes, got {self.kernelSize}")
		if any(i != 1 for i in self.stride):
			raise ConfigError(
				"stride", "block convolutions must use stride 1 for the skip connections to align"
			)
		for axis, (extent, pool) in enumerate(zip(shape[:-1], self.poolSize)):
			if extent % pool**self.depth:
				raise ConfigError(
					"input_shape",
					f"axis {axis} extent {extent} is not divisible by pool size {pool} ** depth {self.depth}",
				)
		if self.maxFilter < 1 or self.downsizeFiltersFactor < 1:
			raise ConfigError("max_filter", "max_filter and downsize_filters_factor must be positive")
		if self.maxFilter // self.downsizeFiltersFactor < 2 ** (self.depth - 1):
			raise ConfigError(
				"max_filter",
				f"must be at least {2 ** (self.depth - 1)} after dividing by downsize_filters_factor",
			)
		if not 0 <= self.dropout < 1:
			raise ConfigError("dropout", f"expected a rate in [0, 1), got {self.dropout}")
		if self.activation not in ACTIVATIONS:
			raise ConfigError("activation", f"expected one of {sorted(ACTIVATIONS)}, got {self.activation!r}")
		if self.padding != "same":
			raise ConfigError("padding", "only same padding keeps the skip connections aligned")
		if self.numOutputs < 1:
			raise ConfigError("num_outputs", f"expected at least 1, got {self.numOutputs}")
		if self.costFunction not in LOSSES:
			raise ConfigError("cost_function", f"expected one of {sorted(LOSSES)}, got {self.costFunction!r}")
		if self.initialLearningRate < 0:
			raise ConfigError("initial_learning_rate", "must not be negative")
		for name, value, allowed in (
			("optimizer", self.optimizer, OPTIMIZERS),
			("block_order", self.blockOrder, BLOCK_ORDERS),
			("block_style", self.blockStyle, BLOCK_STYLES),
			("backend", self.backend, BACKENDS),
		):
			if value not in allowed:
				raise ConfigError(name, f"expected one of {sorted(allowed)}, got {value!r}")
		if not 0 <= self.bnMomentum < 1 or self.bnEpsilon <= 0:
			raise ConfigError("bn_momentum", "expected momentum in [0, 1) and a positive epsilon")

	@property
	def spatialShape(self) -> ShapeType:
		"""The input spatial extents."""
		return self.inputShape[:-1]

	@property
	def inputChannels(self) -> int:
		"""The input channel count."""
		return self.inputShape[-1]

	def stageFilters(self) -> list[int]:
		"""Returns the filter count of every encoder stage, top first."""
		top: int = self.maxFilter // self.downsizeFiltersFactor
		return [top // 2 ** (self.depth - 1 - stage) for stage in range(self.depth)]

	@property
	def bottleneckFilters(self) -> int:
		"""The bottleneck filter count."""
		return self.maxFilter // self.downsizeFiltersFactor

	def bottleneckShape(self) -> ShapeType:
		"""Returns the spatial extents at the bottleneck."""
		return tuple(extent // pool**self.depth for extent, pool in zip(self.spatialShape, self.poolSize))

	def toDict(self) -> JSONObjectType:
		"""Returns the configuration as a snake_case JSON object."""
		result: JSONObjectType = {}
		for item in fields(self):
			value: Any = getattr(self, item.name)
			result[_snake(item.name)] = list(value) if isinstance(value, tuple) else value
		return result

	@classmethod
	def fromDict(cls, data: JSONMappingType) -> UNetConfig:
		"""
		Parses a snake_case configuration.

		Args:
			data: The configuration.

		Returns:
			The configuration.

		Raises:
			ConfigError: A key is unknown or a value is invalid.
		"""
		names: dict[str, str] = {_snake(item.name): item.name for item in fields(cls)}
		unknown: list[str] = sorted(set(data) - set(names))
		if unknown:
			raise ConfigError(unknown[0], "unknown U-Net parameter")
		if "input_shape" not in data:
			raise ConfigError("input_shape", "is required")
		try:
			return cls(**{names[key]: value for key, value in data.items()})
		except TypeError as e:
			raise ConfigError("config", str(e)) from e


def _snake(name: str) -> str:
	return "".join(f"_{char.lower()}" if char.isupper() else char for char in name)


class GraphBuilder:
	"""Accumulates layers with positional names such as `conv_3`."""

	def __init__(self) -> None:
		"""Defines the constructor."""
		self.nodes: list[LayerNode] = []
		self._counters: defaultdict[str, int] = defaultdict(int)

	def add(self, kind: LayerKind, inputs: Sequence[str], role: Optional[str] = None, **params: Any) -> str:
		"""
		Appends a layer.

		Args:
			kind: The layer kind.
			inputs: The names of the input layers.
			role: The convolution role.
			**params: The layer parameters.

		Returns:
			The layer name.
		"""
		name: str = f"{kind.value}_{self._counters[kind.value]}"
		self._counters[kind.value] += 1
		self.nodes.append(LayerNode(name, kind, tuple(inputs), params, role))
		return name

	def input(self, shape: Sequence[int]) -> str:
		"""Appends the input layer."""
		return self.add(LayerKind.INPUT, (), shape=list(shape))

	def conv(self, x: str, filters: int, kernelSize: Sequence[int], role: str = "block") -> str:
		"""Appends a same-padded, unit-stride convolution."""
		return self.add(
			LayerKind.CONV,
			(x,),
			role,
			filters=filters,
			kernel_size=list(kernelSize),
			strides=[1] * len(kernelSize),
			padding="same",
		)

	def build(self, config: Optional[JSONMappingType] = None) -> Model:
		"""Creates an uninitialized model whose output is the last layer."""
		return Model(self.nodes, config)


def _normalizeActivate(builder: GraphBuilder, x: str, config: UNetConfig) -> str:
	if config.batchNorm:
		x = builder.add(LayerKind.BATCH_NORM, (x,), momentum=config.bnMomentum, epsilon=config.bnEpsilon)
	return builder.add(LayerKind.ACTIVATION, (x,), name=config.activation)


def _inception(builder: GraphBuilder, x: str, filters: int, config: UNetConfig) -> str:
	pointwise: list[int] = [1] * len(config.kernelSize)
	direct: str = builder.conv(x, filters, pointwise, "auxiliary")
	spatial: str = builder.conv(x, filters, config.kernelSize, "block")
	pooled: str = builder.add(
		LayerKind.POOL_MAX,
		(x,),
		pool_size=list(config.kernelSize),
		strides=pointwise,
		padding="same",
	)
	pooledProjection: str = builder.conv(pooled, filters, pointwise, "auxiliary")
	merged: str = builder.add(LayerKind.CONCAT, (direct, spatial, pooledProjection))
	return builder.conv(merged, filters, pointwise, "auxiliary")


def convUnit(builder: GraphBuilder, x: str, filters: int, config: UNetConfig) -> str:
	"""
	Appends one convolution unit in the configured order.

	Args:
		builder: The graph builder.
		x: The input layer.
		filters: The output filter count.
		config: The U-Net configuration.

	Returns:
		The output layer.
	"""
	if config.blockOrder == "bn_act_conv":
		x = _normalizeActivate(builder, x, config)
	if config.blockStyle == "inception":
		x = _inception(builder, x, filters, config)
	else:
		x = builder.conv(x, filters, config.kernelSize)
	if config.blockOrder == "conv_bn_act":
		x = _normalizeActivate(builder, x, config)
	return x


def convBlock(builder: GraphBuilder, x: str, filters: int, config: UNetConfig) -> str:
	"""
	Appends the two-unit block of one U-Net stage in the configured style.

	Args:
		builder: The graph builder.
		x: The input layer.
		filters: The output filter count.
		config: The U-Net configuration.

	Returns:
		The output layer.
	"""
	if config.blockStyle == "dense":
		stack: str = x
		for _ in range(2):
			unit: str = convUnit(builder, stack, filters, config)
			stack = builder.add(LayerKind.CONCAT, (stack, unit))
		out: str = builder.conv(stack, filters, [1] * len(config.kernelSize), "auxiliary")
	else:
		first: str = convUnit(builder, x, filters, config)
		out = convUnit(builder, first, filters, config)
		if config.blockStyle == "residual":
			out = builder.add(LayerKind.ADD, (first, out))
		elif config.blockStyle == "se":
			squeezed: str = builder.add(LayerKind.GLOBAL_POOL, (out,))
			squeezed = builder.add(LayerKind.DENSE, (squeezed,), units=max(filters // SE_RATIO, 1))
			squeezed = builder.add(LayerKind.ACTIVATION, (squeezed,), name="relu")
			squeezed = builder.add(LayerKind.DENSE, (squeezed,), units=filters)
			gate: str = builder.add(LayerKind.ACTIVATION, (squeezed,), name="sigmoid")
			out = builder.add(LayerKind.SCALE, (out, gate))
	if config.dropout > 0:
		out = builder.add(LayerKind.DROPOUT, (out,), rate=config.dropout)
	return out


def buildUnet(
	config: Union[UNetConfig, JSONMappingType], seed: int = 0, *, initialize: bool = True
) -> Model:
	"""
	Builds a U-Net.

	Args:
		config: The configuration, or its snake_case JSON form.
		seed: Seeds parameter initialization.
		initialize: False to only build the graph and parameter shapes.

	Returns:
		The model.

	Raises:
		ConfigError: The configuration is invalid.
	"""
	if not isinstance(config, UNetConfig):
		config = UNetConfig.fromDict(config)
	builder = GraphBuilder()
	x: str = builder.input(config.inputShape)
	skips: list[str] = []
	stageFilters: list[int] = config.stageFilters()
	for filters in stageFilters:
		x = convBlock(builder, x, filters, config)
		skips.append(x)
		x = builder.add(LayerKind.POOL_MAX, (x,), pool_size=list(config.poolSize), padding="valid")
	x = convBlock(builder, x, config.bottleneckFilters, config)
	for filters, skip in zip(reversed(stageFilters), reversed(skips)):
		x = builder.add(LayerKind.UPSAMPLE_NN, (x,), size=list(config.poolSize))
		x = builder.add(LayerKind.CONCAT, (x, skip))
		x = convBlock(builder, x, filters, config)
	x = builder.conv(x, config.numOutputs, [1] * len(config.kernelSize), "head")
	builder.add(LayerKind.ACTIVATION, (x,), name="sigmoid" if config.numOutputs == 1 else "softmax")
	model: Model = builder.build(config.toDict())
	logger.debug(
		f"Built a {len(config.spatialShape)}D {config.blockStyle} U-Net with {len(model.nodes)} layers, "
		+ f"{model.countConvolutions()} block convolutions and {model.parameterCount} parameters."
	)
	if initialize:
		model.initialize(seed)
	return model


def unetConfigOf(model: Model) -> Optional[UNetConfig]:
	"""
	Recovers the configuration a model was built from.

	Args:
		model: The model.

	Returns:
		The configuration, or None if the model was not built by `buildUnet`.
	"""
	if not model.config:
		return None
	return UNetConfig.fromDict(model.config)
