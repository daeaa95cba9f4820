"""
Data augmentation.

Augmentation nodes are applied in sequence. Each node turns every sample emitted by the previous
node into `multiplicity` variants, so a stream holds `cases * product(multiplicities)` samples.
Spatial nodes draw one transform per sample and apply it to every group, keeping images and
labels aligned. Samples are only computed when accessed, from a random stream derived from the
seed, the case index and the sample's position in the expansion tree.
"""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import itertools
import json
import logging
import math
import threading
from collections import OrderedDict
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional, Union, overload

# Third-party Modules:
import numpy as np

# Local Modules:
from .archive import writeArchive
from .collection import INPUT_GROUP, LABEL_GROUP, DataCollection
from .errors import ConfigError, InvariantViolationError, NeuroPipeError, ShapeMismatchError
from .typedef import Float64Array, IntArray, JSONMappingType, JSONObjectType, PathType, ShapeType
from .volume import AffineVolume


PATCH_ATTEMPTS: int = 100
SHUFFLE_STREAM: int = 0x5348554F
DEFAULT_CACHE_SIZE: int = 256


logger: logging.Logger = logging.getLogger(__name__)


class AugmentationError(NeuroPipeError):
	"""Implements the base class for augmentation exceptions."""


class PatchLargerThanVolumeError(AugmentationError, ShapeMismatchError):
	"""Raised when a patch does not fit inside a volume."""


class SingleChannelDropoutError(AugmentationError, ValueError):
	"""Raised when channel dropout is asked to work on a single channel."""


class AugmentKind(str, Enum):
	"""The kinds of augmentation node."""

	FLIP = "flip"
	ROTATE90 = "rotate90"
	INTENSITY_SCALE = "intensity_scale"
	INTENSITY_SHIFT = "intensity_shift"
	PATCH_EXTRACT = "patch_extract"
	CHANNEL_DROPOUT = "channel_dropout"
	DOWNSAMPLE_NN = "downsample_nn"


SPATIAL_KINDS: frozenset[AugmentKind] = frozenset(
	(AugmentKind.FLIP, AugmentKind.ROTATE90, AugmentKind.PATCH_EXTRACT, AugmentKind.DOWNSAMPLE_NN)
)


@dataclass(frozen=True)
class ProvenanceStep:
	"""The record of one augmentation applied to a sample."""

	kind: str
	params: Mapping[str, Any]

	def toDict(self) -> JSONObjectType:  # NOQA: D102
		return {"kind": self.kind, "params": dict(self.params)}


@dataclass(frozen=True)
class Sample:
	"""The volumes of one training sample, by group, and how they were produced."""

	caseId: str
	volumes: Mapping[str, AffineVolume]
	provenance: tuple[ProvenanceStep, ...] = ()

	@property
	def spatialShape(self) -> ShapeType:
		"""
		The spatial shape shared by every group.

		Raises:
			ShapeMismatchError: Groups differ in spatial shape.
		"""
		shapes: set[ShapeType] = {volume.spatialShape for volume in self.volumes.values()}
		if len(shapes) != 1:
			raise ShapeMismatchError(f"Groups of sample {self.caseId!r} differ in shape: {sorted(shapes)}")
		return next(iter(shapes))

	def replace(self, volumes: Mapping[str, AffineVolume], kind: str, params: Mapping[str, Any]) -> Sample:
		"""
		Creates the sample that results from an augmentation.

		Args:
			volumes: The new volumes; groups not given are kept.
			kind: The augmentation kind.
			params: The drawn parameters.

		Returns:
			The new sample.
		"""
		return Sample(
			self.caseId, {**self.volumes, **volumes}, (*self.provenance, ProvenanceStep(kind, dict(params)))
		)


@dataclass(frozen=True)
class Orientation:
	"""
	An axis permutation followed by axis flips.

	Output axis `i` takes input axis `permutation[i]`, then is reversed if `flips[i]` is set.
	"""

	permutation: tuple[int, ...]
	flips: tuple[bool, ...]

	@classmethod
	def identity(cls, ndim: int) -> Orientation:  # NOQA: D102
		return cls(tuple(range(ndim)), (False,) * ndim)

	@property
	def isIdentity(self) -> bool:  # NOQA: D102
		return self.permutation == tuple(range(len(self.permutation))) and not any(self.flips)

	def apply(self, data: np.ndarray[Any, Any]) -> np.ndarray[Any, Any]:
		"""
		Reorients an array with a trailing channel axis.

		Args:
			data: The array, spatial axes first.

		Returns:
			The reoriented copy.
		"""
		ndim: int = len(self.permutation)
		result = np.transpose(data, (*self.permutation, ndim))
		flipped: tuple[int, ...] = tuple(axis for axis, flip in enumerate(self.flips) if flip)
		if flipped:
			result = np.flip(result, axis=flipped)
		return np.ascontiguousarray(result)

	def invert(self) -> Orientation:
		"""
		Computes the inverse orientation.

		Returns:
			The orientation undoing this one.
		"""
		inverse: list[int] = [0] * len(self.permutation)
		for axis, source in enumerate(self.permutation):
			inverse[source] = axis
		return Orientation(tuple(inverse), tuple(self.flips[inverse[axis]] for axis in range(len(inverse))))

	def voxelMatrix(self, inputShape: ShapeType) -> Float64Array:
		"""
		Maps output voxel indices to input voxel indices.

		Args:
			inputShape: The spatial shape before reorientation.

		Returns:
			A 4x4 homogeneous matrix, padded to 3 spatial axes.
		"""
		matrix: Float64Array = np.eye(4, dtype=np.float64)
		ndim: int = len(self.permutation)
		matrix[:ndim, :ndim] = 0.0
		for axis, source in enumerate(self.permutation):
			if self.flips[axis]:
				matrix[source, axis] = -1.0
				matrix[source, 3] = inputShape[source] - 1
			else:
				matrix[source, axis] = 1.0
		return matrix

	def toDict(self) -> JSONObjectType:  # NOQA: D102
		return {"permutation": list(self.permutation), "flips": list(self.flips)}

	@classmethod
	def fromDict(cls, data: JSONMappingType) -> Orientation:  # NOQA: D102
		return cls(tuple(int(i) for i in data["permutation"]), tuple(bool(i) for i in data["flips"]))


def orientationGroup(
	spatialShape: ShapeType, axesAllowed: Optional[Sequence[int]] = None, *, flipsOnly: bool = False
) -> list[Orientation]:
	"""
	Enumerates the shape-preserving orientations generated by flips and quarter turns.

	Args:
		spatialShape: The spatial shape; permutations may only exchange axes of equal extent.
		axesAllowed: The axes that may be flipped or exchanged. Defaults to every axis.
		flipsOnly: True to exclude axis exchanges.

	Returns:
		The orientations, identity first: 8 for a square, 48 for a cube.
	"""
	ndim: int = len(spatialShape)
	allowed: tuple[int, ...] = tuple(range(ndim)) if axesAllowed is None else tuple(sorted(set(axesAllowed)))
	if any(not 0 <= axis < ndim for axis in allowed):
		raise InvariantViolationError(f"Axes {allowed} are out of range for {ndim} spatial dimensions.")
	permutations: list[tuple[int, ...]] = []
	for order in [allowed] if flipsOnly else itertools.permutations(allowed):
		permutation: list[int] = list(range(ndim))
		for axis, source in zip(allowed, order):
			permutation[axis] = source
		if all(spatialShape[source] == spatialShape[axis] for axis, source in enumerate(permutation)):
			permutations.append(tuple(permutation))
	result: list[Orientation] = []
	for candidate in permutations:
		for chosen in itertools.product((False, True), repeat=len(allowed)):
			flips: list[bool] = [False] * ndim
			for axis, flip in zip(allowed, chosen):
				flips[axis] = flip
			result.append(Orientation(candidate, tuple(flips)))
	return result


def reorientVolume(volume: AffineVolume, orientation: Orientation) -> AffineVolume:
	"""
	Reorients a volume, updating the affine so voxels keep their world positions.

	Args:
		volume: The volume.
		orientation: The orientation.

	Returns:
		The reoriented volume.
	"""
	affine: Float64Array = volume.affine @ orientation.voxelMatrix(volume.spatialShape)
	return volume.withData(orientation.apply(volume.data), affine=affine)


def flipRotate(
	sample: Sample,
	axesAllowed: Optional[Sequence[int]],
	rng: np.random.Generator,
	*,
	flipsOnly: bool = False,
) -> Sample:
	"""
	Applies a uniformly drawn orientation to every group of a sample.

	Args:
		sample: The sample.
		axesAllowed: The axes that may be flipped or exchanged, or None for all.
		rng: The random generator.
		flipsOnly: True to draw from axis flips only.

	Returns:
		The reoriented sample.
	"""
	group: list[Orientation] = orientationGroup(sample.spatialShape, axesAllowed, flipsOnly=flipsOnly)
	orientation: Orientation = group[int(rng.integers(len(group)))]
	volumes: dict[str, AffineVolume] = {
		name: reorientVolume(volume, orientation) for name, volume in sample.volumes.items()
	}
	return sample.replace(volumes, "flip" if flipsOnly else "rotate90", orientation.toDict())


def intensityScaleShift(
	sample: Sample,
	scaleRange: Sequence[float],
	shiftRange: Sequence[float],
	rng: np.random.Generator,
	*,
	groups: Iterable[str] = (INPUT_GROUP,),
	kind: str = "intensity_scale_shift",
) -> Sample:
	"""
	Applies `v * s + t` with a scale and shift drawn per channel.

	Args:
		sample: The sample.
		scaleRange: The bounds of the uniform scale distribution, 0 < a <= b.
		shiftRange: The bounds of the uniform shift distribution, c <= d.
		rng: The random generator.
		groups: The groups to modify; others are untouched.
		kind: The kind recorded in the provenance.

	Returns:
		The modified sample.
	"""
	a, b = (float(i) for i in scaleRange)
	c, d = (float(i) for i in shiftRange)
	if not 0 < a <= b or not c <= d:
		raise InvariantViolationError(f"Invalid scale range {scaleRange} or shift range {shiftRange}.")
	volumes: dict[str, AffineVolume] = {}
	drawn: JSONObjectType = {}
	for name in groups:
		if name not in sample.volumes:
			continue
		volume: AffineVolume = sample.volumes[name]
		scale: Float64Array = rng.uniform(a, b, size=volume.channels)
		shift: Float64Array = rng.uniform(c, d, size=volume.channels)
		volumes[name] = volume.withData(volume.data.astype(np.float64) * scale + shift)
		drawn[name] = {"scale": scale.tolist(), "shift": shift.tolist()}
	return sample.replace(volumes, kind, drawn)


def _crop(volume: AffineVolume, corner: Sequence[int], shape: Sequence[int]) -> AffineVolume:
	region: tuple[slice, ...] = tuple(slice(start, start + extent) for start, extent in zip(corner, shape))
	translation: Float64Array = np.eye(4, dtype=np.float64)
	translation[: len(corner), 3] = corner
	return volume.withData(volume.data[region].copy(), affine=volume.affine @ translation)


def _requirePatchFits(patchShape: Sequence[int], spatialShape: ShapeType) -> None:
	if len(patchShape) != len(spatialShape) or any(p > s for p, s in zip(patchShape, spatialShape)):
		raise PatchLargerThanVolumeError(
			"Patch does not fit inside the volume", expected=spatialShape, got=tuple(patchShape)
		)


def extractPatch(
	sample: Sample,
	patchShape: Sequence[int],
	rng: np.random.Generator,
	*,
	labelCentered: bool = False,
	labelGroup: str = LABEL_GROUP,
	minLabelVoxels: int = 1,
) -> Sample:
	"""
	Crops one patch from every group of a sample.

	Label-centered patches take their center from a random nonzero voxel of the label group,
	redrawn until the patch holds `minLabelVoxels` label voxels or 100 attempts pass, after which
	the last draw is kept. Without label voxels the corner is drawn uniformly and a warning is logged.

	Args:
		sample: The sample.
		patchShape: The patch spatial shape.
		rng: The random generator.
		labelCentered: True to center the patch on a label voxel.
		labelGroup: The group holding the labels.
		minLabelVoxels: The number of label voxels wanted inside the patch.

	Returns:
		The patch sample.

	Raises:
		PatchLargerThanVolumeError: The patch does not fit.
	"""
	spatialShape: ShapeType = sample.spatialShape
	_requirePatchFits(patchShape, spatialShape)
	patch: IntArray = np.array(patchShape, dtype=np.int64)
	upper: IntArray = np.array(spatialShape, dtype=np.int64) - patch
	drawn: JSONObjectType = {"label_centered": False}
	corner: Optional[IntArray] = None
	if labelCentered:
		if labelGroup not in sample.volumes:
			raise InvariantViolationError(f"Sample {sample.caseId!r} has no label group {labelGroup!r}.")
		labels = np.any(sample.volumes[labelGroup].data != 0, axis=-1)
		candidates: IntArray = np.argwhere(labels)
		if len(candidates) == 0:
			logger.warning(f"No label voxels in sample {sample.caseId!r}; drawing the patch uniformly.")
			drawn["fallback"] = "no_label_voxels"
		else:
			for attempt in range(1, PATCH_ATTEMPTS + 1):
				center: IntArray = candidates[int(rng.integers(len(candidates)))]
				corner = np.clip(center - patch // 2, 0, upper)
				region = tuple(slice(int(s), int(s + p)) for s, p in zip(corner, patch))
				if int(labels[region].sum()) >= minLabelVoxels:
					break
			drawn.update({"label_centered": True, "attempts": attempt})
	if corner is None:
		corner = np.array([int(rng.integers(0, int(u) + 1)) for u in upper], dtype=np.int64)
	cornerList: list[int] = [int(i) for i in corner]
	drawn.update({"corner": cornerList, "shape": [int(i) for i in patch]})
	volumes: dict[str, AffineVolume] = {
		name: _crop(volume, cornerList, patchShape) for name, volume in sample.volumes.items()
	}
	return sample.replace(volumes, "patch_extract", drawn)


def extractPatches(
	sample: Sample,
	patchShape: Sequence[int],
	count: int,
	rng: np.random.Generator,
	*,
	labelFraction: float = 0.0,
	labelGroup: str = LABEL_GROUP,
	minLabelVoxels: int = 1,
) -> list[Sample]:
	"""
	Crops several patches from a sample.

	The first `ceil(labelFraction * count)` patches are label-centered, the rest uniform.

	Args:
		sample: The sample.
		patchShape: The patch spatial shape.
		count: The number of patches.
		rng: The random generator.
		labelFraction: The fraction of label-centered patches.
		labelGroup: The group holding the labels.
		minLabelVoxels: The number of label voxels wanted inside label-centered patches.

	Returns:
		The patch samples.
	"""
	centered: int = math.ceil(labelFraction * count)
	return [
		extractPatch(
			sample,
			patchShape,
			rng,
			labelCentered=i < centered,
			labelGroup=labelGroup,
			minLabelVoxels=minLabelVoxels,
		)
		for i in range(count)
	]


def channelDropout(
	sample: Sample, probability: float, rng: np.random.Generator, *, groups: Iterable[str] = (INPUT_GROUP,)
) -> Sample:
	"""
	Zeroes random channels, keeping at least one.

	Args:
		sample: The sample.
		probability: The probability that a channel is dropped, in [0, 1).
		rng: The random generator.
		groups: The groups to modify.

	Returns:
		The modified sample. Surviving channels are not rescaled.

	Raises:
		SingleChannelDropoutError: A modified group has a single channel.
	"""
	if not 0 <= probability < 1:
		raise InvariantViolationError(f"Dropout probability must be in [0, 1), not {probability}.")
	volumes: dict[str, AffineVolume] = {}
	drawn: JSONObjectType = {}
	for name in groups:
		if name not in sample.volumes:
			continue
		volume: AffineVolume = sample.volumes[name]
		if volume.channels < 2:
			raise SingleChannelDropoutError(f"Group {name!r} of {sample.caseId!r} has a single channel.")
		dropped: np.ndarray[Any, Any] = rng.random(volume.channels) < probability
		while dropped.all():
			dropped = rng.random(volume.channels) < probability
		data = volume.data.copy()
		data[..., dropped] = 0.0
		volumes[name] = volume.withData(data)
		drawn[name] = [int(i) for i in np.flatnonzero(dropped)]
	return sample.replace(volumes, "channel_dropout", {"dropped": drawn})


def downsampleNN(sample: Sample, factor: int) -> Sample:
	"""
	Keeps every `factor`-th voxel along each spatial axis of every group.

	Axes not divisible by the factor are first cropped to the largest divisible extent.

	Args:
		sample: The sample.
		factor: The integer factor, at least 2.

	Returns:
		The downsampled sample, with the affine spacing multiplied by the factor.
	"""
	if factor < 2:
		raise InvariantViolationError(f"Downsampling factor must be at least 2, not {factor}.")
	spatialShape: ShapeType = sample.spatialShape
	if any(extent < factor for extent in spatialShape):
		raise PatchLargerThanVolumeError(
			f"Volume is smaller than the downsampling factor {factor}", got=spatialShape
		)
	cropped: list[int] = [extent - extent % factor for extent in spatialShape]
	volumes: dict[str, AffineVolume] = {}
	for name, volume in sample.volumes.items():
		region: tuple[slice, ...] = tuple(slice(0, extent, factor) for extent in cropped)
		affine: Float64Array = volume.affine.copy()
		affine[:3, : volume.ndim] *= factor
		volumes[name] = volume.withData(np.ascontiguousarray(volume.data[region]), affine=affine)
	return sample.replace(volumes, "downsample_nn", {"factor": factor, "cropped_shape": cropped})


# Parameter names accepted by each kind, with defaults. Required parameters map to None.
PARAMETER_DEFAULTS: dict[AugmentKind, dict[str, Any]] = {
	AugmentKind.FLIP: {"axes": None},
	AugmentKind.ROTATE90: {"axes": None},
	AugmentKind.INTENSITY_SCALE: {"range": None},
	AugmentKind.INTENSITY_SHIFT: {"range": None},
	AugmentKind.PATCH_EXTRACT: {
		"shape": None,
		"count": None,
		"label_fraction": 0.0,
		"label_group": LABEL_GROUP,
		"min_label_voxels": 1,
	},
	AugmentKind.CHANNEL_DROPOUT: {"probability": None},
	AugmentKind.DOWNSAMPLE_NN: {"factor": None},
}
OPTIONAL_PARAMETERS: frozenset[str] = frozenset(("axes", "count"))


def _validateParams(  # NOQA: C901
	kind: AugmentKind, params: Mapping[str, Any], multiplicity: int
) -> dict[str, Any]:
	defaults: dict[str, Any] = PARAMETER_DEFAULTS[kind]
	unknown: set[str] = set(params) - set(defaults)
	if unknown:
		raise ConfigError(f"params.{sorted(unknown)[0]}", f"not a parameter of {kind.value}")
	resolved: dict[str, Any] = {**defaults, **params}
	for key, value in resolved.items():
		if value is None and key not in OPTIONAL_PARAMETERS:
			raise ConfigError(f"params.{key}", f"required by {kind.value}")
	if kind in (AugmentKind.INTENSITY_SCALE, AugmentKind.INTENSITY_SHIFT):
		bounds: Any = resolved["range"]
		if not isinstance(bounds, (list, tuple)) or len(bounds) != 2 or not bounds[0] <= bounds[1]:
			raise ConfigError("params.range", f"expected [low, high] with low <= high, got {bounds!r}")
		if kind is AugmentKind.INTENSITY_SCALE and bounds[0] <= 0:
			raise ConfigError("params.range", "scale bounds must be positive")
		resolved["range"] = [float(bounds[0]), float(bounds[1])]
	elif kind is AugmentKind.PATCH_EXTRACT:
		shape: Any = resolved["shape"]
		valid: bool = isinstance(shape, (list, tuple)) and bool(shape)
		if not valid or not all(isinstance(i, int) and i >= 1 for i in shape):
			raise ConfigError("params.shape", f"expected positive integers, got {shape!r}")
		resolved["shape"] = [int(i) for i in shape]
		if resolved["count"] is None:
			resolved["count"] = multiplicity
		if resolved["count"] != multiplicity:
			count: Any = resolved["count"]
			raise ConfigError("params.count", f"must equal the multiplicity {multiplicity}, got {count!r}")
		if not 0 <= float(resolved["label_fraction"]) <= 1:
			raise ConfigError("params.label_fraction", "must be in [0, 1]")
		if not isinstance(resolved["min_label_voxels"], int) or resolved["min_label_voxels"] < 1:
			raise ConfigError("params.min_label_voxels", "expected an integer >= 1")
	elif kind is AugmentKind.CHANNEL_DROPOUT:
		if not 0 <= float(resolved["probability"]) < 1:
			raise ConfigError("params.probability", "must be in [0, 1)")
	elif kind is AugmentKind.DOWNSAMPLE_NN:
		if not isinstance(resolved["factor"], int) or resolved["factor"] < 2:
			raise ConfigError("params.factor", "expected an integer >= 2")
	elif resolved["axes"] is not None:
		resolved["axes"] = [int(i) for i in resolved["axes"]]
	return resolved


@dataclass(frozen=True)
class AugmentationNode:
	"""One augmentation with its fan-out."""

	kind: AugmentKind
	params: Mapping[str, Any] = field(default_factory=dict)
	multiplicity: int = 1
	appliesTo: Optional[frozenset[str]] = None
	"""The groups modified by intensity and dropout nodes, or None for input_data only."""

	def __post_init__(self) -> None:
		"""
		Performs additional processing after dataclass initialization.

		Raises:
			ConfigError: The node is invalid.
		"""
		try:
			kind = AugmentKind(self.kind)
		except ValueError:
			raise ConfigError("kind", f"unknown augmentation kind {self.kind!r}") from None
		multiplicity: Any = self.multiplicity
		if isinstance(multiplicity, bool) or not isinstance(multiplicity, int) or multiplicity < 1:
			raise ConfigError("multiplicity", f"expected an integer >= 1, got {self.multiplicity!r}")
		object.__setattr__(self, "kind", kind)
		object.__setattr__(self, "params", _validateParams(kind, self.params, self.multiplicity))
		if self.appliesTo is not None:
			object.__setattr__(self, "appliesTo", frozenset(self.appliesTo))

	@property
	def spatial(self) -> bool:
		"""True if the node moves voxels and applies to every group."""
		return self.kind in SPATIAL_KINDS

	@property
	def groups(self) -> frozenset[str]:
		"""The groups modified by a non-spatial node."""
		return frozenset((INPUT_GROUP,)) if self.appliesTo is None else self.appliesTo

	@classmethod
	def fromDict(cls, data: JSONMappingType) -> AugmentationNode:
		"""
		Creates a node from its JSON form.

		Args:
			data: A mapping with 'kind' and optional 'params', 'multiplicity' and 'applies_to'.
				Patch extraction nodes without a multiplicity use their count.

		Returns:
			The node.
		"""
		if not isinstance(data, Mapping) or "kind" not in data:
			raise ConfigError("kind", f"augmentation entries need a kind, got {data!r}")
		unknown: set[str] = set(data) - {"kind", "params", "multiplicity", "applies_to"}
		if unknown:
			raise ConfigError(sorted(unknown)[0], "not an augmentation field")
		params: dict[str, Any] = dict(data.get("params") or {})
		multiplicity: Any = data.get("multiplicity")
		if multiplicity is None:
			multiplicity = params.get("count", 1) if data["kind"] == AugmentKind.PATCH_EXTRACT.value else 1
		appliesTo: Any = data.get("applies_to")
		return cls(
			kind=data["kind"],
			params=params,
			multiplicity=multiplicity,
			appliesTo=None if appliesTo is None else frozenset(str(i) for i in appliesTo),
		)

	def toDict(self) -> JSONObjectType:  # NOQA: D102
		result: JSONObjectType = {
			"kind": self.kind.value,
			"params": dict(self.params),
			"multiplicity": self.multiplicity,
		}
		if self.appliesTo is not None:
			result["applies_to"] = sorted(self.appliesTo)
		return result

	def outputShape(self, spatialShape: ShapeType) -> ShapeType:
		"""
		Checks the node against an input shape.

		Args:
			spatialShape: The spatial shape of samples entering the node.

		Returns:
			The spatial shape of samples leaving the node.

		Raises:
			PatchLargerThanVolumeError: A patch or downsampling factor does not fit.
		"""
		if self.kind is AugmentKind.PATCH_EXTRACT:
			_requirePatchFits(self.params["shape"], spatialShape)
			return tuple(self.params["shape"])
		if self.kind is AugmentKind.DOWNSAMPLE_NN:
			factor: int = self.params["factor"]
			if any(extent < factor for extent in spatialShape):
				raise PatchLargerThanVolumeError(f"Volume is smaller than factor {factor}", got=spatialShape)
			return tuple(extent // factor for extent in spatialShape)
		axes: Optional[list[int]] = self.params.get("axes")
		if axes is not None and any(not 0 <= axis < len(spatialShape) for axis in axes):
			raise InvariantViolationError(f"Axes {axes} are out of range for shape {spatialShape}.")
		return spatialShape

	def applyChild(self, sample: Sample, child: int, rng: np.random.Generator) -> Sample:
		"""
		Produces one of the node's variants of a sample.

		Args:
			sample: The input sample.
			child: The variant index, in [0, multiplicity).
			rng: The variant's random generator.

		Returns:
			The variant.
		"""
		params: Mapping[str, Any] = self.params
		if self.kind in (AugmentKind.FLIP, AugmentKind.ROTATE90):
			return flipRotate(sample, params["axes"], rng, flipsOnly=self.kind is AugmentKind.FLIP)
		if self.kind is AugmentKind.INTENSITY_SCALE:
			return intensityScaleShift(
				sample, params["range"], (0.0, 0.0), rng, groups=self.groups, kind=self.kind.value
			)
		if self.kind is AugmentKind.INTENSITY_SHIFT:
			return intensityScaleShift(
				sample, (1.0, 1.0), params["range"], rng, groups=self.groups, kind=self.kind.value
			)
		if self.kind is AugmentKind.PATCH_EXTRACT:
			return extractPatch(
				sample,
				params["shape"],
				rng,
				labelCentered=child < math.ceil(float(params["label_fraction"]) * self.multiplicity),
				labelGroup=params["label_group"],
				minLabelVoxels=params["min_label_voxels"],
			)
		if self.kind is AugmentKind.CHANNEL_DROPOUT:
			return channelDropout(sample, float(params["probability"]), rng, groups=self.groups)
		return downsampleNN(sample, params["factor"])


def augmentationFromSpec(spec: Iterable[JSONMappingType]) -> list[AugmentationNode]:
	"""
	Creates augmentation nodes from their JSON list form.

	Args:
		spec: The node mappings, in order.

	Returns:
		The nodes.

	Raises:
		ConfigError: A node is invalid; the field is prefixed with the node index.
	"""
	nodes: list[AugmentationNode] = []
	for index, item in enumerate(spec):
		try:
			nodes.append(AugmentationNode.fromDict(item))
		except ConfigError as e:
			raise ConfigError(f"[{index}].{e.field}", str(e).partition(": ")[2]) from e
	return nodes


def augmentationFromJson(text: str) -> list[AugmentationNode]:
	"""
	Creates augmentation nodes from JSON text.

	Args:
		text: The JSON list.

	Returns:
		The nodes.
	"""
	try:
		spec: Any = json.loads(text)
	except json.JSONDecodeError as e:
		raise ConfigError("augmentation", f"invalid JSON: {e}") from e
	if not isinstance(spec, list):
		raise ConfigError("augmentation", "expected a JSON list")
	return augmentationFromSpec(spec)


class SampleStream(Sequence[Sample]):
	"""
	The lazily evaluated samples produced by expanding a collection.

	Sample `i` belongs to case `i // product(multiplicities)`; the remainder, read as mixed-radix
	digits, selects the variant taken at every node. Samples are pure functions of the collection,
	the nodes, the seed and the index, so they may be materialized in any order or concurrently.
	"""

	def __init__(
		self,
		collection: DataCollection,
		nodes: Sequence[AugmentationNode],
		seed: int,
		*,
		cacheSize: int = DEFAULT_CACHE_SIZE,
	) -> None:
		"""
		Defines the constructor.

		Args:
			collection: The source collection.
			nodes: The augmentation nodes, in order.
			seed: The random seed.
			cacheSize: The number of intermediate samples kept for reuse by sibling samples.
		"""
		self.collection: DataCollection = collection
		self.nodes: tuple[AugmentationNode, ...] = tuple(nodes)
		self.seed: int = seed
		self.cacheSize: int = cacheSize
		self.samplesPerCase: int = math.prod(node.multiplicity for node in self.nodes)
		self._cache: OrderedDict[tuple[int, ...], Sample] = OrderedDict()
		self._lock: threading.Lock = threading.Lock()

	def __len__(self) -> int:
		return len(self.collection) * self.samplesPerCase

	@overload
	def __getitem__(self, index: int) -> Sample: ...

	@overload
	def __getitem__(self, index: slice) -> list[Sample]: ...

	def __getitem__(self, index: Union[int, slice]) -> Union[Sample, list[Sample]]:
		if isinstance(index, slice):
			return [self.materialize(i) for i in range(*index.indices(len(self)))]
		if index < 0:
			index += len(self)
		return self.materialize(index)

	def __iter__(self) -> Iterator[Sample]:
		for index in range(len(self)):
			yield self.materialize(index)

	def digits(self, index: int) -> tuple[int, ...]:
		"""
		Decomposes a sample index.

		Args:
			index: The sample index.

		Returns:
			The case index followed by the variant index at every node.

		Raises:
			IndexError: The index is out of range.
		"""
		if not 0 <= index < len(self):
			raise IndexError(f"Sample index {index} out of range for a stream of {len(self)}.")
		caseIndex, remainder = divmod(index, self.samplesPerCase)
		result: list[int] = []
		for node in reversed(self.nodes):
			remainder, child = divmod(remainder, node.multiplicity)
			result.append(child)
		return (caseIndex, *reversed(result))

	def rng(self, prefix: tuple[int, ...]) -> np.random.Generator:
		"""
		Derives the random generator of a node application.

		Args:
			prefix: The case index followed by the variant indices up to and including the node's.

		Returns:
			A generator independent of every other prefix.
		"""
		entropy: list[int] = [self.seed, prefix[0], len(prefix) - 2, *prefix[1:]]
		return np.random.default_rng(np.random.SeedSequence(entropy))

	def _cached(self, prefix: tuple[int, ...]) -> Optional[Sample]:
		with self._lock:
			sample: Optional[Sample] = self._cache.get(prefix)
			if sample is not None:
				self._cache.move_to_end(prefix)
			return sample

	def _store(self, prefix: tuple[int, ...], sample: Sample) -> None:
		if self.cacheSize < 1:
			return
		with self._lock:
			self._cache[prefix] = sample
			self._cache.move_to_end(prefix)
			while len(self._cache) > self.cacheSize:
				self._cache.popitem(last=False)

	def rawSample(self, caseIndex: int) -> Sample:
		"""
		Loads a case as an unaugmented sample.

		Args:
			caseIndex: The case index.

		Returns:
			The sample with every group of the case.
		"""
		case = self.collection.cases[caseIndex]
		return Sample(
			case.caseId,
			{
				group.name: self.collection.caseVolume(case.caseId, group.name)
				for group in self.collection.groups
				if group.name in case.sources
			},
		)

	def materialize(self, index: int) -> Sample:
		"""
		Computes a sample.

		Args:
			index: The sample index.

		Returns:
			The sample.
		"""
		digits: tuple[int, ...] = self.digits(index)
		depth: int = len(digits)
		sample: Optional[Sample] = None
		while depth > 1:
			sample = self._cached(digits[:depth])
			if sample is not None:
				break
			depth -= 1
		if sample is None:
			sample = self.rawSample(digits[0])
		for level in range(depth - 1, len(self.nodes)):
			prefix: tuple[int, ...] = digits[: level + 2]
			sample = self.nodes[level].applyChild(sample, digits[level + 1], self.rng(prefix))
			if level < len(self.nodes) - 1:
				self._store(prefix, sample)
		return sample

	def variantIndex(self, index: int) -> int:
		"""
		The position of a sample among the samples of its case.

		Args:
			index: The sample index.

		Returns:
			The index modulo the samples per case.
		"""
		return index % self.samplesPerCase


def expand(collection: DataCollection, nodes: Sequence[AugmentationNode], seed: int) -> SampleStream:
	"""
	Expands a collection through a sequence of augmentation nodes.

	Node shapes are checked against every case before the stream is returned.

	Args:
		collection: The collection.
		nodes: The augmentation nodes, in order.
		seed: The random seed.

	Returns:
		The lazy sample stream.

	Raises:
		PatchLargerThanVolumeError: A patch does not fit a case.
	"""
	stream = SampleStream(collection, nodes, seed)
	if stream.nodes:
		for caseIndex in range(len(collection)):
			shape: ShapeType = stream.rawSample(caseIndex).spatialShape
			for node in stream.nodes:
				shape = node.outputShape(shape)
	logger.debug(f"Expanded {len(collection)} cases into {len(stream)} samples.")
	return stream


def sampleId(stream: SampleStream, index: int) -> str:
	"""
	Names a sample after its case and its position among the case's samples.

	Args:
		stream: The stream.
		index: The sample index.

	Returns:
		An id such as 'p01/aug0003'.
	"""
	caseId: str = stream.collection.cases[index // stream.samplesPerCase].caseId
	return f"{caseId}/aug{stream.variantIndex(index):04d}"


def expandToArchive(
	collection: DataCollection, nodes: Sequence[AugmentationNode], seed: int, path: PathType
) -> None:
	"""
	Materializes an augmented collection, shuffles it and writes it as an archive.

	Every volume's metadata carries the sample provenance as JSON under 'provenance'.

	Args:
		collection: The collection.
		nodes: The augmentation nodes, in order.
		seed: The random seed, which also drives the shuffle.
		path: The archive path.
	"""
	stream: SampleStream = expand(collection, nodes, seed)
	shuffler: np.random.Generator = np.random.default_rng(np.random.SeedSequence([seed, SHUFFLE_STREAM]))
	order: IntArray = shuffler.permutation(len(stream))
	volumes: dict[str, dict[str, AffineVolume]] = {}
	for index in order:
		sample: Sample = stream.materialize(int(index))
		provenance: str = json.dumps([step.toDict() for step in sample.provenance], sort_keys=True)
		volumes[sampleId(stream, int(index))] = {
			name: AffineVolume(volume.data, volume.affine, {**volume.meta, "provenance": provenance})
			for name, volume in sample.volumes.items()
		}
	writeArchive(DataCollection.fromStackedVolumes(collection.groups, volumes), path)
	logger.info(f"Wrote {len(stream)} augmented samples to {path}.")
