"""Preprocessing and postprocessing transforms, and chains of them."""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import json
import logging
import math
import os
import shlex
import subprocess
import tempfile
import threading
from collections.abc import Iterable, Iterator, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

# Third-party Modules:
import numpy as np

# Local Modules:
from .collection import INPUT_GROUP, LABEL_GROUP, PREDICTION_GROUP, DataCollection
from .errors import ConfigError, InvariantViolationError, NeuroPipeError, ShapeMismatchError
from .morphology import holeFill, islandRemoval, requireBinary
from .nifti import readNifti, writeNifti
from .typedef import FloatArray, IntArray, JSONMappingType, JSONObjectType
from .volume import AffineVolume


NORMALIZATION_EPSILON: float = 1e-8
EXTERNAL_TIMEOUT: float = 600.0
EXTERNAL_PERMITS_VARIABLE: str = "NEUROPIPE_EXTERNAL_PERMITS"
DEFAULT_EXTERNAL_PERMITS: int = 2
STDERR_TAIL_LENGTH: int = 2000
DEFAULT_MIN_VOXELS: int = 10


logger: logging.Logger = logging.getLogger(__name__)


class TransformError(NeuroPipeError):
	"""Implements the base class for transform exceptions."""


class MaskShapeMismatchError(ShapeMismatchError, TransformError):
	"""Raised when a mask and a volume differ in spatial shape."""


class EmptyMaskError(TransformError, ValueError):
	"""Raised when a normalization mask selects fewer than 2 voxels."""


class BadPercentileRangeError(TransformError, ValueError):
	"""Raised when percentile bounds are not 0 <= lo < hi <= 100."""


class CommandFailedError(TransformError):
	"""Raised when an external command exits with a nonzero status."""

	def __init__(self, exitCode: int, stderrTail: str) -> None:
		"""
		Defines the constructor.

		Args:
			exitCode: The exit status.
			stderrTail: The end of the command's standard error.
		"""
		super().__init__(f"External command exited with status {exitCode}: {stderrTail.strip()}")
		self.exitCode: int = exitCode
		self.stderrTail: str = stderrTail


class OutputMissingError(TransformError):
	"""Raised when an external command does not produce its output file."""


class CommandTimeoutError(TransformError):
	"""Raised when an external command runs past its timeout."""


class ChainError(TransformError):
	"""Raised when a node of a chain fails."""

	def __init__(self, nodeIndex: int, kind: str, cause: Exception, caseId: Optional[str] = None) -> None:
		"""
		Defines the constructor.

		Args:
			nodeIndex: The 0-based index of the failing node.
			kind: The kind of the failing node.
			cause: The underlying error.
			caseId: The case being processed, if any.
		"""
		where: str = f" on case {caseId!r}" if caseId is not None else ""
		super().__init__(f"Transform {nodeIndex} ({kind}) failed{where}: {cause}")
		self.nodeIndex: int = nodeIndex
		self.kind: str = kind
		self.cause: Exception = cause
		self.caseId: Optional[str] = caseId


def _requireMaskShape(volume: AffineVolume, mask: AffineVolume) -> None:
	if mask.spatialShape != volume.spatialShape:
		raise MaskShapeMismatchError(
			"Mask and volume differ in spatial shape", expected=volume.spatialShape, got=mask.spatialShape
		)


def zeroMeanUnitStd(
	volume: AffineVolume,
	*,
	perChannel: bool = True,
	mask: Optional[AffineVolume] = None,
	epsilon: float = NORMALIZATION_EPSILON,
) -> AffineVolume:
	"""
	Normalizes a volume to zero mean and unit population standard deviation.

	Args:
		volume: The volume.
		perChannel: True to normalize every channel separately, False to use global statistics.
		mask: An optional mask; statistics use voxels where the first mask channel is nonzero,
			and voxels outside the mask are set to 0.
		epsilon: The lower bound for the standard deviation.

	Returns:
		The normalized volume. A constant region maps to zeros.

	Raises:
		MaskShapeMismatchError: The mask differs in spatial shape.
		EmptyMaskError: The mask selects fewer than 2 voxels.
	"""
	data: FloatArray = volume.data.astype(np.float64)
	inside: np.ndarray[Any, Any] = np.ones(volume.spatialShape, dtype=bool)
	if mask is not None:
		_requireMaskShape(volume, mask)
		inside = mask.data[..., 0] != 0
		if int(inside.sum()) < 2:
			raise EmptyMaskError(f"Mask selects {int(inside.sum())} voxels, at least 2 are required.")
	region: FloatArray = data[inside]
	if perChannel:
		mean: Union[FloatArray, float] = region.mean(axis=0)
		std: Union[FloatArray, float] = region.std(axis=0)
	else:
		mean = float(region.mean())
		std = float(region.std())
	result: FloatArray = (data - mean) / np.maximum(std, epsilon)
	result[~inside] = 0.0
	return volume.withData(result)


def clipPercentiles(volume: AffineVolume, lo: float, hi: float) -> AffineVolume:
	"""
	Clamps every channel to a percentile range.

	Percentiles use linear interpolation between the closest ranks.

	Args:
		volume: The volume.
		lo: The lower percentile.
		hi: The upper percentile.

	Returns:
		The clipped volume.

	Raises:
		BadPercentileRangeError: The bounds are not 0 <= lo < hi <= 100.
	"""
	if not (math.isfinite(lo) and math.isfinite(hi) and 0 <= lo < hi <= 100):
		raise BadPercentileRangeError(f"Percentile range ({lo}, {hi}) must satisfy 0 <= lo < hi <= 100.")
	result = np.empty_like(volume.data)
	for i in range(volume.channels):
		channel = volume.data[..., i]
		low, high = np.percentile(channel, [lo, hi])
		result[..., i] = np.clip(channel, np.float32(low), np.float32(high))
	return volume.withData(result)


def _linearAlongAxis(data: FloatArray, axis: int, coordinates: FloatArray) -> FloatArray:
	extent: int = data.shape[axis]
	if extent == 1:
		return np.repeat(data, len(coordinates), axis=axis)
	# Clamping the base index rather than the coordinate extrapolates the edge segment linearly.
	base: IntArray = np.clip(np.floor(coordinates).astype(np.int64), 0, extent - 2)
	weight: FloatArray = coordinates - base
	shape: list[int] = [1] * data.ndim
	shape[axis] = len(coordinates)
	weight = weight.reshape(shape)
	return np.take(data, base, axis=axis) * (1.0 - weight) + np.take(data, base + 1, axis=axis) * weight


def resample(
	volume: AffineVolume, targetSpacing: Union[float, Sequence[float]], interp: str = "trilinear"
) -> AffineVolume:
	"""
	Resamples a volume to a new voxel spacing.

	Output voxel centers start at the input origin voxel; the world extent is kept and the affine
	columns are rescaled.

	Args:
		volume: The volume.
		targetSpacing: The new spacing in millimeters, per spatial axis or one value for all.
		interp: 'trilinear' (linear along every axis) or 'nearest'.

	Returns:
		The resampled volume, of shape ceil(shape * spacing / targetSpacing).
	"""
	target: tuple[float, ...]
	if isinstance(targetSpacing, (int, float)):
		target = (float(targetSpacing),) * volume.ndim
	else:
		target = tuple(float(i) for i in targetSpacing)
	if len(target) != volume.ndim:
		raise InvariantViolationError(f"Expected {volume.ndim} target spacings, got {len(target)}.")
	if not all(math.isfinite(i) and i > 0 for i in target):
		raise InvariantViolationError(f"Target spacing must be positive, got {target}.")
	if interp not in ("trilinear", "nearest"):
		raise InvariantViolationError(f"Unknown interpolation {interp!r}.")
	spacing: tuple[float, ...] = volume.spacing
	ratios: list[float] = [target[axis] / spacing[axis] for axis in range(volume.ndim)]
	outShape: list[int] = [
		max(1, math.ceil(round(extent / ratio, 9))) for extent, ratio in zip(volume.spatialShape, ratios)
	]
	if tuple(outShape) == volume.spatialShape and np.allclose(spacing, target, rtol=1e-9, atol=0.0):
		return volume.copy()
	coordinates: list[FloatArray] = [
		np.arange(n, dtype=np.float64) * ratio for n, ratio in zip(outShape, ratios)
	]
	data: FloatArray
	if interp == "nearest":
		indices: list[IntArray] = [
			np.clip(np.floor(c + 0.5).astype(np.int64), 0, extent - 1)
			for c, extent in zip(coordinates, volume.spatialShape)
		]
		data = volume.data[np.ix_(*indices, np.arange(volume.channels))]
	else:
		data = volume.data.astype(np.float64)
		for axis, c in enumerate(coordinates):
			data = _linearAlongAxis(data, axis, c)
	affine = volume.affine.copy()
	for axis, ratio in enumerate(ratios):
		affine[:3, axis] *= ratio
	logger.debug(f"Resampled {volume.spatialShape} to {tuple(outShape)} ({interp}).")
	return AffineVolume(data, affine, volume.meta)


def applyMask(volume: AffineVolume, mask: AffineVolume) -> AffineVolume:
	"""
	Zeroes voxels outside a binary mask, in every channel.

	Args:
		volume: The volume.
		mask: A binary mask with one channel, or as many channels as the volume.

	Returns:
		The masked volume.

	Raises:
		MaskShapeMismatchError: The mask differs in spatial shape.
		NonBinaryMaskError: The mask holds values other than 0 and 1.
	"""
	_requireMaskShape(volume, mask)
	requireBinary(mask, "Mask")
	if mask.channels not in (1, volume.channels):
		raise MaskShapeMismatchError("Mask channel count", expected=(1, volume.channels), got=mask.channels)
	return volume.withData(volume.data * mask.data)


def binarize(volume: AffineVolume, threshold: float = 0.5) -> AffineVolume:
	"""
	Thresholds a volume.

	Args:
		volume: The volume.
		threshold: Values strictly greater become 1, the rest 0.

	Returns:
		The binary volume.
	"""
	if not math.isfinite(threshold):
		raise InvariantViolationError(f"Threshold must be finite, not {threshold}.")
	return volume.withData((volume.data > threshold).astype(np.float32))


class _Permits:
	def __init__(self) -> None:
		self._lock: threading.Lock = threading.Lock()
		self._semaphore: Optional[threading.BoundedSemaphore] = None

	def get(self) -> threading.BoundedSemaphore:
		with self._lock:
			if self._semaphore is None:
				count: int = int(os.getenv(EXTERNAL_PERMITS_VARIABLE, str(DEFAULT_EXTERNAL_PERMITS)))
				self._semaphore = threading.BoundedSemaphore(max(1, count))
			return self._semaphore


_externalPermits: _Permits = _Permits()


def validateCommandTemplate(template: str) -> list[str]:
	"""
	Splits an external command template into arguments.

	Args:
		template: A shell-style command line containing the {input} and {output} placeholders.

	Returns:
		The arguments, placeholders still in place.

	Raises:
		InvariantViolationError: A placeholder is missing or the template cannot be split.
	"""
	try:
		arguments: list[str] = shlex.split(template)
	except ValueError as e:
		raise InvariantViolationError(f"Invalid command template {template!r}: {e}") from e
	for placeholder in ("{input}", "{output}"):
		if not any(placeholder in argument for argument in arguments):
			raise InvariantViolationError(f"Command template {template!r} lacks {placeholder}.")
	return arguments


def runExternal(template: str, volume: AffineVolume, *, timeout: float = EXTERNAL_TIMEOUT) -> AffineVolume:
	"""
	Processes a volume with an external program.

	The volume is written to a temporary NIfTI file, the command is run without a shell, and the
	file it writes is read back. Temporary files are removed whether or not the command succeeds.
	At most NEUROPIPE_EXTERNAL_PERMITS commands run at once.

	Args:
		template: The command line, with {input} and {output} placeholders for the file paths.
		volume: The volume to process.
		timeout: The number of seconds to wait for the command.

	Returns:
		The output volume, carrying the input's metadata.

	Raises:
		CommandFailedError: The command exited with a nonzero status or could not be started.
		OutputMissingError: The command did not write the output file.
		CommandTimeoutError: The command ran past the timeout.
	"""
	arguments: list[str] = validateCommandTemplate(template)
	with _externalPermits.get(), tempfile.TemporaryDirectory(prefix="neuropipe_") as directory:
		inputPath: Path = Path(directory) / "input.nii"
		outputPath: Path = Path(directory) / "output.nii"
		writeNifti(volume, inputPath)
		command: list[str] = [
			argument.replace("{input}", str(inputPath)).replace("{output}", str(outputPath))
			for argument in arguments
		]
		logger.debug(f"Running external command {command}.")
		try:
			process = subprocess.run(command, capture_output=True, timeout=timeout, check=False)
		except subprocess.TimeoutExpired as e:
			raise CommandTimeoutError(f"External command timed out after {timeout} seconds.") from e
		except OSError as e:
			raise CommandFailedError(127, str(e)) from e
		if process.returncode != 0:
			stderr: str = process.stderr.decode("utf-8", "replace")
			raise CommandFailedError(process.returncode, stderr[-STDERR_TAIL_LENGTH:])
		if not outputPath.is_file():
			raise OutputMissingError(f"External command did not write {outputPath.name}.")
		result: AffineVolume = readNifti(outputPath)
	return AffineVolume(result.data, result.affine, volume.meta)


class TransformKind(str, Enum):
	"""The kinds of transform node."""

	ZERO_MEAN_UNIT_STD = "zero_mean_unit_std"
	CLIP_PERCENTILES = "clip_percentiles"
	RESAMPLE = "resample"
	APPLY_MASK = "apply_mask"
	BINARIZE = "binarize"
	ISLAND_REMOVAL = "island_removal"
	HOLE_FILL = "hole_fill"
	EXTERNAL_COMMAND = "external_command"


# Parameter names accepted by each kind, with defaults. Required parameters map to None.
PARAMETER_DEFAULTS: dict[TransformKind, dict[str, Any]] = {
	TransformKind.ZERO_MEAN_UNIT_STD: {"per_channel": True, "mask_group": None},
	TransformKind.CLIP_PERCENTILES: {"lo": None, "hi": None},
	TransformKind.RESAMPLE: {"spacing": None, "interp": "trilinear"},
	TransformKind.APPLY_MASK: {"mask_group": None},
	TransformKind.BINARIZE: {"threshold": 0.5},
	TransformKind.ISLAND_REMOVAL: {"min_voxels": DEFAULT_MIN_VOXELS, "connectivity": None},
	TransformKind.HOLE_FILL: {"connectivity": None},
	TransformKind.EXTERNAL_COMMAND: {"command": None, "timeout": EXTERNAL_TIMEOUT},
}
OPTIONAL_PARAMETERS: frozenset[str] = frozenset(("mask_group", "connectivity"))


def _number(params: Mapping[str, Any], key: str) -> float:
	value: Any = params[key]
	if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
		raise ConfigError(f"params.{key}", f"expected a finite number, got {value!r}")
	return float(value)


def _validateParams(kind: TransformKind, params: Mapping[str, Any]) -> dict[str, Any]:  # NOQA: C901
	defaults: dict[str, Any] = PARAMETER_DEFAULTS[kind]
	unknown: set[str] = set(params) - set(defaults)
	if unknown:
		raise ConfigError(f"params.{sorted(unknown)[0]}", f"not a parameter of {kind.value}")
	resolved: dict[str, Any] = {**defaults, **params}
	for key, value in resolved.items():
		if value is None and key not in OPTIONAL_PARAMETERS:
			raise ConfigError(f"params.{key}", f"required by {kind.value}")
	if kind is TransformKind.CLIP_PERCENTILES:
		lo, hi = _number(resolved, "lo"), _number(resolved, "hi")
		if not 0 <= lo < hi <= 100:
			raise BadPercentileRangeError(f"Percentile range ({lo}, {hi}) must satisfy 0 <= lo < hi <= 100.")
	elif kind is TransformKind.RESAMPLE:
		spacing: Any = resolved["spacing"]
		values: list[Any] = list(spacing) if isinstance(spacing, (list, tuple)) else [spacing]
		if not values or not all(
			isinstance(i, (int, float)) and not isinstance(i, bool) and math.isfinite(i) and i > 0
			for i in values
		):
			raise ConfigError("params.spacing", f"expected positive numbers, got {spacing!r}")
		if resolved["interp"] not in ("trilinear", "nearest"):
			raise ConfigError("params.interp", f"expected trilinear or nearest, got {resolved['interp']!r}")
	elif kind is TransformKind.BINARIZE:
		_number(resolved, "threshold")
	elif kind is TransformKind.ISLAND_REMOVAL:
		minVoxels: Any = resolved["min_voxels"]
		if isinstance(minVoxels, bool) or not isinstance(minVoxels, int) or minVoxels < 1:
			raise ConfigError("params.min_voxels", f"expected an integer >= 1, got {minVoxels!r}")
	elif kind is TransformKind.EXTERNAL_COMMAND:
		if not isinstance(resolved["command"], str):
			raise ConfigError("params.command", "expected a string")
		try:
			validateCommandTemplate(resolved["command"])
		except InvariantViolationError as e:
			raise ConfigError("params.command", str(e)) from e
		if _number(resolved, "timeout") <= 0:
			raise ConfigError("params.timeout", "must be positive")
	elif kind is TransformKind.APPLY_MASK and not isinstance(resolved["mask_group"], str):
		raise ConfigError("params.mask_group", "expected a group name")
	if resolved.get("connectivity") not in (None, 4, 6, 8, 26):
		raise ConfigError("params.connectivity", f"expected 4, 8, 6 or 26, got {resolved['connectivity']!r}")
	return resolved


@dataclass(frozen=True)
class TransformNode:
	"""One step of a transform chain."""

	kind: TransformKind
	params: Mapping[str, Any] = field(default_factory=dict)
	appliesTo: Optional[frozenset[str]] = None
	"""The groups this node touches, or None for the chain's default groups."""
	name: Optional[str] = None
	"""An optional name, used to skip the node."""

	def __post_init__(self) -> None:
		"""
		Performs additional processing after dataclass initialization.

		Raises:
			ConfigError: The kind or parameters are invalid.
		"""
		try:
			kind = TransformKind(self.kind)
		except ValueError:
			raise ConfigError("kind", f"unknown transform kind {self.kind!r}") from None
		object.__setattr__(self, "kind", kind)
		object.__setattr__(self, "params", _validateParams(kind, self.params))
		if self.appliesTo is not None:
			object.__setattr__(self, "appliesTo", frozenset(self.appliesTo))

	@classmethod
	def fromDict(cls, data: JSONMappingType) -> TransformNode:
		"""
		Creates a node from its JSON form.

		Args:
			data: A mapping with 'kind' and optional 'params', 'applies_to' and 'name'.

		Returns:
			The node.

		Raises:
			ConfigError: The mapping is invalid.
		"""
		if not isinstance(data, Mapping) or "kind" not in data:
			raise ConfigError("kind", f"transform entries need a kind, got {data!r}")
		unknown: set[str] = set(data) - {"kind", "params", "applies_to", "name"}
		if unknown:
			raise ConfigError(sorted(unknown)[0], "not a transform field")
		appliesTo: Any = data.get("applies_to")
		return cls(
			kind=data["kind"],
			params=dict(data.get("params") or {}),
			appliesTo=None if appliesTo is None else frozenset(str(i) for i in appliesTo),
			name=data.get("name"),
		)

	def toDict(self) -> JSONObjectType:
		"""
		Converts the node to its JSON form.

		Returns:
			The mapping, with only the parameters that differ from their defaults.
		"""
		defaults: dict[str, Any] = PARAMETER_DEFAULTS[self.kind]
		result: JSONObjectType = {
			"kind": self.kind.value,
			"params": {key: value for key, value in self.params.items() if value != defaults[key]},
		}
		if self.appliesTo is not None:
			result["applies_to"] = sorted(self.appliesTo)
		if self.name is not None:
			result["name"] = self.name
		return result

	def apply(  # NOQA: C901
		self,
		volume: AffineVolume,
		*,
		group: str = INPUT_GROUP,
		related: Optional[Mapping[str, AffineVolume]] = None,
	) -> AffineVolume:
		"""
		Applies the node to one volume.

		Args:
			volume: The volume.
			group: The group the volume belongs to; resampling of ground truth always uses nearest.
			related: The other volumes of the same case, by group, for mask lookups.

		Returns:
			The transformed volume.
		"""
		params: Mapping[str, Any] = self.params
		if self.kind is TransformKind.ZERO_MEAN_UNIT_STD:
			mask: Optional[AffineVolume] = None
			if params["mask_group"] is not None:
				mask = self._relatedVolume(params["mask_group"], related)
			return zeroMeanUnitStd(volume, perChannel=bool(params["per_channel"]), mask=mask)
		if self.kind is TransformKind.CLIP_PERCENTILES:
			return clipPercentiles(volume, params["lo"], params["hi"])
		if self.kind is TransformKind.RESAMPLE:
			interp: str = "nearest" if group == LABEL_GROUP else params["interp"]
			return resample(volume, params["spacing"], interp)
		if self.kind is TransformKind.APPLY_MASK:
			return applyMask(volume, self._relatedVolume(params["mask_group"], related))
		if self.kind is TransformKind.BINARIZE:
			return binarize(volume, params["threshold"])
		if self.kind is TransformKind.ISLAND_REMOVAL:
			return islandRemoval(volume, params["min_voxels"], params["connectivity"])
		if self.kind is TransformKind.HOLE_FILL:
			return holeFill(volume, params["connectivity"])
		return runExternal(params["command"], volume, timeout=params["timeout"])

	@staticmethod
	def _relatedVolume(name: str, related: Optional[Mapping[str, AffineVolume]]) -> AffineVolume:
		if related is None or name not in related:
			raise ConfigError("params.mask_group", f"group {name!r} is not available")
		return related[name]


@dataclass(frozen=True)
class TransformChain:
	"""An ordered list of transform nodes."""

	nodes: tuple[TransformNode, ...] = ()
	defaultGroups: tuple[str, ...] = (INPUT_GROUP,)
	"""The groups touched by nodes without an explicit group set; the first is the default for volumes."""

	def __post_init__(self) -> None:
		"""Performs additional processing after dataclass initialization."""
		object.__setattr__(self, "nodes", tuple(self.nodes))
		object.__setattr__(self, "defaultGroups", tuple(self.defaultGroups))
		if not self.defaultGroups:
			raise InvariantViolationError("A chain needs at least one default group.")

	def __len__(self) -> int:
		return len(self.nodes)

	def __iter__(self) -> Iterator[TransformNode]:
		return iter(self.nodes)

	@classmethod
	def fromSpec(
		cls, spec: Iterable[JSONMappingType], *, defaultGroups: Sequence[str] = (INPUT_GROUP,)
	) -> TransformChain:
		"""
		Creates a chain from its JSON list form.

		Args:
			spec: The node mappings, in order.
			defaultGroups: The groups for nodes without 'applies_to'.

		Returns:
			The chain.

		Raises:
			ConfigError: A node is invalid; the field is prefixed with the node index.
		"""
		nodes: list[TransformNode] = []
		for index, item in enumerate(spec):
			try:
				nodes.append(TransformNode.fromDict(item))
			except ConfigError as e:
				raise ConfigError(f"[{index}].{e.field}", str(e).partition(": ")[2]) from e
			except (InvariantViolationError, BadPercentileRangeError) as e:
				raise ConfigError(f"[{index}]", str(e)) from e
		return cls(tuple(nodes), tuple(defaultGroups))

	@classmethod
	def fromJson(cls, text: str, *, defaultGroups: Sequence[str] = (INPUT_GROUP,)) -> TransformChain:
		"""
		Creates a chain from JSON text.

		Args:
			text: The JSON list.
			defaultGroups: The groups for nodes without 'applies_to'.

		Returns:
			The chain.
		"""
		try:
			spec: Any = json.loads(text)
		except json.JSONDecodeError as e:
			raise ConfigError("chain", f"invalid JSON: {e}") from e
		if not isinstance(spec, list):
			raise ConfigError("chain", "expected a JSON list")
		return cls.fromSpec(spec, defaultGroups=defaultGroups)

	def toSpec(self) -> list[JSONObjectType]:
		"""
		Converts the chain to its JSON list form.

		Returns:
			The node mappings.
		"""
		return [node.toDict() for node in self.nodes]

	def groupsFor(self, node: TransformNode) -> frozenset[str]:
		"""
		Determines the groups a node touches.

		Args:
			node: The node.

		Returns:
			The node's explicit groups, or the chain defaults.
		"""
		return node.appliesTo if node.appliesTo is not None else frozenset(self.defaultGroups)

	def without(self, names: Iterable[str]) -> TransformChain:
		"""
		Removes named nodes.

		Args:
			names: The names of the nodes to remove.

		Returns:
			The chain without those nodes.

		Raises:
			ConfigError: A name does not match any node.
		"""
		skipped: set[str] = set(names)
		unknown: set[str] = skipped - {node.name for node in self.nodes if node.name is not None}
		if unknown:
			raise ConfigError("skip", f"no step named {sorted(unknown)[0]!r}")
		for node in self.nodes:
			if node.name in skipped:
				logger.warning(f"Skipping step {node.name!r} ({node.kind.value}).")
		kept: tuple[TransformNode, ...] = tuple(node for node in self.nodes if node.name not in skipped)
		return TransformChain(kept, self.defaultGroups)


def postprocessChain(spec: Iterable[JSONMappingType]) -> TransformChain:
	"""
	Creates a chain whose nodes default to prediction volumes.

	Args:
		spec: The node mappings, in order.

	Returns:
		The chain.
	"""
	return TransformChain.fromSpec(spec, defaultGroups=(PREDICTION_GROUP,))


def _applyNodes(
	chain: TransformChain,
	volumes: dict[str, AffineVolume],
	*,
	caseId: Optional[str] = None,
	only: Optional[str] = None,
) -> dict[str, AffineVolume]:
	for index, node in enumerate(chain.nodes):
		targets: frozenset[str] = chain.groupsFor(node)
		for group in list(volumes):
			if group not in targets or (only is not None and group != only):
				continue
			try:
				volumes[group] = node.apply(volumes[group], group=group, related=volumes)
			except NeuroPipeError as e:
				raise ChainError(index, node.kind.value, e, caseId) from e
	return volumes


def chainApplyVolume(
	chain: TransformChain,
	volume: AffineVolume,
	*,
	group: Optional[str] = None,
	related: Optional[Mapping[str, AffineVolume]] = None,
) -> AffineVolume:
	"""
	Applies a chain to a single volume.

	Args:
		chain: The chain.
		volume: The volume.
		group: The group the volume plays, defaulting to the chain's first default group.
			Nodes that do not touch this group are skipped.
		related: Other volumes available to mask lookups, by group.

	Returns:
		The transformed volume.

	Raises:
		ChainError: A node failed.
	"""
	name: str = chain.defaultGroups[0] if group is None else group
	volumes: dict[str, AffineVolume] = {**(related or {}), name: volume}
	return _applyNodes(chain, volumes, only=name)[name]


def chainApplyCollection(
	chain: TransformChain, collection: DataCollection, *, workers: int = 1
) -> DataCollection:
	"""
	Applies a chain to every case of a collection.

	Args:
		chain: The chain.
		collection: The collection. Every case tensor is loaded.
		workers: The number of cases processed concurrently.

	Returns:
		A new in-memory collection with the same ids and groups.

	Raises:
		ChainError: A node failed; the error names the case.
	"""

	def process(caseId: str) -> dict[str, AffineVolume]:
		case = collection.case(caseId)
		volumes: dict[str, AffineVolume] = {
			group.name: collection.caseVolume(caseId, group.name)
			for group in collection.groups
			if group.name in case.sources
		}
		return _applyNodes(chain, volumes, caseId=caseId)

	if workers > 1:
		with ThreadPoolExecutor(max_workers=workers) as executor:
			results: list[dict[str, AffineVolume]] = list(executor.map(process, collection.caseIds))
	else:
		results = [process(caseId) for caseId in collection.caseIds]
	logger.info(f"Applied {len(chain)} transforms to {len(collection)} cases.")
	return DataCollection.fromStackedVolumes(collection.groups, dict(zip(collection.caseIds, results)))


def chainApply(
	chain: TransformChain,
	target: Union[AffineVolume, DataCollection],
	*,
	group: Optional[str] = None,
	related: Optional[Mapping[str, AffineVolume]] = None,
	workers: int = 1,
) -> Union[AffineVolume, DataCollection]:
	"""
	Applies a chain to a volume or a collection.

	Args:
		chain: The chain.
		target: A volume or a collection.
		group: For volumes, the group the volume plays.
		related: For volumes, other volumes available to mask lookups.
		workers: For collections, the number of cases processed concurrently.

	Returns:
		A result of the same kind as the target.
	"""
	if isinstance(target, DataCollection):
		return chainApplyCollection(chain, target, workers=workers)
	return chainApplyVolume(chain, target, group=group, related=related)

