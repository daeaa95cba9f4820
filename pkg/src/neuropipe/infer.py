"""
Patch-based inference.

A volume is tiled with fixed-size patches, optionally overlapping. Every patch is run through the
model and the predictions are averaged per voxel, so a network trained on small patches can label a
volume of any size.
"""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import itertools
import logging
import math
import time
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional, Protocol, Union

# Third-party Modules:
import numpy as np

# Local Modules:
from .collection import INPUT_GROUP, PREDICTION_GROUP, DataCollection
from .errors import ConfigError, NeuroPipeError, ShapeMismatchError
from .transforms import TransformChain, chainApplyVolume
from .typedef import Float64Array, FloatArray, JSONMappingType, JSONObjectType, ShapeType
from .volume import AffineVolume


DEFAULT_BATCH_SIZE: int = 8
DEFAULT_OVERLAP: float = 0.0


logger: logging.Logger = logging.getLogger(__name__)


class InferenceError(NeuroPipeError):
	"""Implements the base class for inference errors."""


class PatchExceedsVolumeError(InferenceError, ShapeMismatchError):
	"""Raised when an unpadded volume is smaller than the patch along some axis."""


class BadOverlapError(InferenceError, ValueError):
	"""Raised when an overlap fraction is outside [0, 1)."""


class PadMode(str, Enum):
	"""How a volume is padded so that patches cover it."""

	ZERO = "zero"
	REFLECT = "reflect"
	NONE = "none"


class PatchModel(Protocol):
	"""Anything that maps a batch of patches to a batch of predictions."""

	@property
	def inputShape(self) -> ShapeType: ...  # NOQA: D102

	@property
	def numOutputs(self) -> int: ...  # NOQA: D102

	def predict(self, batch: FloatArray) -> FloatArray: ...  # NOQA: D102


@dataclass(frozen=True)
class PatchPlan:
	"""The patch corners that tile a volume, and the padding applied first."""

	volumeShape: ShapeType
	"""The spatial shape of the unpadded volume."""
	patchShape: ShapeType
	offsets: tuple[tuple[int, ...], ...]
	"""Patch corners in the padded volume, sorted lexicographically."""
	pad: tuple[tuple[int, int], ...]
	"""Voxels added before and after each spatial axis."""
	overlapFraction: tuple[float, ...]
	padMode: PadMode = PadMode.ZERO

	@property
	def paddedShape(self) -> ShapeType:
		"""The spatial shape after padding."""
		return tuple(extent + before + after for extent, (before, after) in zip(self.volumeShape, self.pad))

	def __len__(self) -> int:
		return len(self.offsets)

	def coverage(self) -> np.ndarray[Any, np.dtype[np.int64]]:
		"""Returns the number of patches covering each voxel of the padded volume."""
		counts: np.ndarray[Any, np.dtype[np.int64]] = np.zeros(self.paddedShape, dtype=np.int64)
		for offset in self.offsets:
			counts[_window(offset, self.patchShape)] += 1
		return counts

	def toDict(self) -> JSONObjectType:  # NOQA: D102
		return {
			"volume_shape": list(self.volumeShape),
			"patch_shape": list(self.patchShape),
			"offsets": [list(offset) for offset in self.offsets],
			"pad": [list(pair) for pair in self.pad],
			"overlap_fraction": list(self.overlapFraction),
			"pad_mode": self.padMode.value,
		}


def _window(offset: Sequence[int], shape: Sequence[int]) -> tuple[slice, ...]:
	return tuple(slice(start, start + size) for start, size in zip(offset, shape))


def _perAxis(value: Union[float, Sequence[float]], ndim: int) -> tuple[float, ...]:
	if isinstance(value, (int, float)):
		return (float(value),) * ndim
	values: tuple[float, ...] = tuple(float(item) for item in value)
	if len(values) != ndim:
		raise ShapeMismatchError("Overlap needs one fraction per axis", expected=ndim, got=len(values))
	return values


def _axisStarts(extent: int, patch: int, stride: int) -> list[int]:
	starts: list[int] = list(range(0, extent - patch + 1, stride))
	if starts[-1] != extent - patch:
		starts.append(extent - patch)
	return starts


def planPatches(
	volumeShape: Sequence[int],
	patchShape: Sequence[int],
	overlap: Union[float, Sequence[float]] = DEFAULT_OVERLAP,
	padMode: Union[PadMode, str] = PadMode.ZERO,
) -> PatchPlan:
	"""
	Computes the patches that tile a volume.

	Along each axis the stride is `max(1, floor(patch * (1 - overlap)))`. Without padding, a final
	patch is clamped to abut the far boundary. With padding, the axis is grown to the smallest extent
	no smaller than the volume or the patch that the stride tiles exactly, split evenly before and
	after the volume.

	Args:
		volumeShape: The spatial shape of the volume.
		patchShape: The spatial shape of the patches.
		overlap: The overlap fraction, for every axis or per axis.
		padMode: zero, reflect, or none.

	Returns:
		The plan.

	Raises:
		BadOverlapError: An overlap fraction is outside [0, 1).
		PatchExceedsVolumeError: The patch is larger than an unpadded volume.
		ShapeMismatchError: The shapes have different lengths.
	"""
	volume: ShapeType = tuple(int(extent) for extent in volumeShape)
	patch: ShapeType = tuple(int(extent) for extent in patchShape)
	if len(volume) != len(patch):
		raise ShapeMismatchError(
			"Patch and volume have different dimensionality", expected=len(volume), got=len(patch)
		)
	if any(extent < 1 for extent in patch):
		raise ShapeMismatchError("Patch extents must be positive", got=patch)
	fractions: tuple[float, ...] = _perAxis(overlap, len(volume))
	for fraction in fractions:
		if not 0.0 <= fraction < 1.0:
			raise BadOverlapError(f"Overlap must be in [0, 1), not {fraction}.")
	mode: PadMode = PadMode(padMode)
	pad: list[tuple[int, int]] = []
	starts: list[list[int]] = []
	for axis, (extent, size, fraction) in enumerate(zip(volume, patch, fractions)):
		stride: int = max(1, math.floor(size * (1.0 - fraction)))
		if mode is PadMode.NONE:
			if size > extent:
				raise PatchExceedsVolumeError(
					f"Patch does not fit along axis {axis} without padding", expected=extent, got=size
				)
			pad.append((0, 0))
			starts.append(_axisStarts(extent, size, stride))
			continue
		padded: int = size + stride * max(0, math.ceil((extent - size) / stride))
		before: int = (padded - extent) // 2
		pad.append((before, padded - extent - before))
		starts.append(_axisStarts(padded, size, stride))
	plan = PatchPlan(
		volumeShape=volume,
		patchShape=patch,
		offsets=tuple(itertools.product(*starts)),
		pad=tuple(pad),
		overlapFraction=fractions,
		padMode=mode,
	)
	logger.debug(
		f"Planned {len(plan)} patches of {patch} over {volume}, padding {plan.pad}, "
		+ f"overlap {fractions}."
	)
	return plan


def _padVolume(data: FloatArray, plan: PatchPlan) -> FloatArray:
	if not any(before or after for before, after in plan.pad):
		return data
	widths: list[tuple[int, int]] = [*plan.pad, (0, 0)]
	if plan.padMode is PadMode.REFLECT:
		return np.pad(data, widths, mode="reflect")
	return np.pad(data, widths, mode="constant")


def _batches(offsets: Sequence[tuple[int, ...]], size: int) -> Iterator[Sequence[tuple[int, ...]]]:
	for start in range(0, len(offsets), size):
		yield offsets[start : start + size]


def runPatchedInference(
	model: PatchModel,
	volume: AffineVolume,
	plan: PatchPlan,
	batchSize: int = DEFAULT_BATCH_SIZE,
	*,
	threads: int = 1,
) -> AffineVolume:
	"""
	Predicts a volume patch by patch, averaging overlapping predictions.

	Batches may be evaluated concurrently; predictions are always accumulated in plan order, so the
	result does not depend on the thread count.

	Args:
		model: The model. Its spatial input must equal the plan's patch shape.
		volume: The volume, with as many channels as the model takes.
		plan: The patch plan for the volume.
		batchSize: The number of patches per model call.
		threads: The number of batches evaluated concurrently.

	Returns:
		The averaged prediction with the volume's spatial shape and affine, and one channel per model
		output.

	Raises:
		ShapeMismatchError: The model, plan, and volume disagree.
	"""
	if batchSize < 1:
		raise ConfigError("batch_size", f"must be at least 1, not {batchSize}")
	inputShape: ShapeType = tuple(model.inputShape)
	if inputShape[:-1] != plan.patchShape:
		raise ShapeMismatchError(
			"Model spatial input differs from the patch shape", expected=plan.patchShape, got=inputShape[:-1]
		)
	if inputShape[-1] != volume.channels:
		raise ShapeMismatchError(
			"Volume channels differ from the model input", expected=inputShape[-1], got=volume.channels
		)
	if volume.spatialShape != plan.volumeShape:
		raise ShapeMismatchError(
			"Volume does not match the plan", expected=plan.volumeShape, got=volume.spatialShape
		)
	started: float = time.perf_counter()
	padded: FloatArray = _padVolume(volume.data, plan)
	sums: Float64Array = np.zeros((*plan.paddedShape, model.numOutputs), dtype=np.float64)
	counts: Float64Array = np.zeros((*plan.paddedShape, 1), dtype=np.float64)

	def predict(offsets: Sequence[tuple[int, ...]]) -> FloatArray:
		batch: FloatArray = np.stack([padded[_window(offset, plan.patchShape)] for offset in offsets])
		return model.predict(batch)

	batches: list[Sequence[tuple[int, ...]]] = list(_batches(plan.offsets, batchSize))
	if threads > 1:
		with ThreadPoolExecutor(max_workers=threads) as executor:
			predictions: Iterator[FloatArray] = executor.map(predict, batches)
			for offsets, prediction in zip(batches, predictions):
				_accumulate(sums, counts, offsets, prediction, plan.patchShape)
	else:
		for offsets in batches:
			_accumulate(sums, counts, offsets, predict(offsets), plan.patchShape)
	if np.any(counts == 0):
		raise InferenceError("The plan leaves voxels uncovered.")
	averaged: Float64Array = sums / counts
	unpad: tuple[slice, ...] = tuple(
		slice(before, before + extent) for extent, (before, _) in zip(plan.volumeShape, plan.pad)
	)
	output: AffineVolume = volume.withData(averaged[unpad].astype(np.float32))
	logger.info(
		f"Inferred {len(plan)} patches in {len(batches)} batches "
		+ f"({(time.perf_counter() - started) * 1000:.0f} ms)."
	)
	return output


def _accumulate(
	sums: Float64Array,
	counts: Float64Array,
	offsets: Sequence[tuple[int, ...]],
	prediction: FloatArray,
	patchShape: ShapeType,
) -> None:
	expected: ShapeType = (len(offsets), *patchShape, sums.shape[-1])
	if prediction.shape != expected:
		raise ShapeMismatchError(
			"Model returned an unexpected shape", expected=expected, got=prediction.shape
		)
	for offset, patch in zip(offsets, prediction):
		window: tuple[slice, ...] = _window(offset, patchShape)
		sums[window] += patch
		counts[window] += 1


@dataclass(frozen=True)
class PlanParams:
	"""How a pipeline tiles volumes for one model."""

	patchShape: Optional[ShapeType] = None
	"""The patch shape, or None for the model's spatial input shape."""
	overlap: Union[float, tuple[float, ...]] = DEFAULT_OVERLAP
	pad: PadMode = PadMode.ZERO
	batchSize: int = DEFAULT_BATCH_SIZE

	@classmethod
	def fromDict(cls, data: JSONMappingType) -> PlanParams:
		"""
		Parses plan parameters.

		Args:
			data: A mapping with optional keys patch_shape, overlap, pad, and batch_size.

		Returns:
			The parameters.

		Raises:
			ConfigError: A key is unknown or a value is invalid.
		"""
		unknown: set[str] = set(data) - {"patch_shape", "overlap", "pad", "batch_size"}
		if unknown:
			raise ConfigError(sorted(unknown)[0], "unknown plan parameter")
		patchShape: Optional[ShapeType] = None
		if data.get("patch_shape") is not None:
			try:
				patchShape = tuple(int(extent) for extent in data["patch_shape"])
			except (TypeError, ValueError):
				raise ConfigError("patch_shape", "must be a list of integers") from None
		rawOverlap: Any = data.get("overlap", DEFAULT_OVERLAP)
		try:
			overlap: Union[float, tuple[float, ...]] = (
				float(rawOverlap)
				if isinstance(rawOverlap, (int, float))
				else tuple(float(item) for item in rawOverlap)
			)
		except (TypeError, ValueError):
			raise ConfigError("overlap", "must be a number or a list of numbers") from None
		for fraction in (overlap,) if isinstance(overlap, float) else overlap:
			if not 0.0 <= fraction < 1.0:
				raise ConfigError("overlap", f"must be in [0, 1), not {fraction}")
		try:
			pad: PadMode = PadMode(data.get("pad", PadMode.ZERO.value))
		except ValueError:
			raise ConfigError("pad", f"must be one of {[mode.value for mode in PadMode]}") from None
		batchSize: Any = data.get("batch_size", DEFAULT_BATCH_SIZE)
		if not isinstance(batchSize, int) or isinstance(batchSize, bool) or batchSize < 1:
			raise ConfigError("batch_size", f"must be a positive integer, not {batchSize!r}")
		return cls(patchShape=patchShape, overlap=overlap, pad=pad, batchSize=batchSize)

	def toDict(self) -> JSONObjectType:  # NOQA: D102
		return {
			"patch_shape": None if self.patchShape is None else list(self.patchShape),
			"overlap": self.overlap if isinstance(self.overlap, float) else list(self.overlap),
			"pad": self.pad.value,
			"batch_size": self.batchSize,
		}

	def withOverlap(self, overlap: float) -> PlanParams:
		"""Returns a copy with a different overlap for every axis."""
		return PlanParams(patchShape=self.patchShape, overlap=overlap, pad=self.pad, batchSize=self.batchSize)

	def plan(self, model: PatchModel, volumeShape: Sequence[int]) -> PatchPlan:
		"""Plans the patches of a volume for a model."""
		patchShape: ShapeType = self.patchShape or tuple(model.inputShape)[:-1]
		return planPatches(volumeShape, patchShape, self.overlap, self.pad)


def inferVolume(
	model: PatchModel,
	volume: AffineVolume,
	planParams: PlanParams,
	postprocess: Optional[TransformChain] = None,
	*,
	threads: int = 1,
	related: Optional[dict[str, AffineVolume]] = None,
) -> AffineVolume:
	"""
	Predicts a volume and post-processes the prediction.

	Args:
		model: The model.
		volume: The input volume.
		planParams: How to tile the volume.
		postprocess: A chain applied to the prediction; nodes not touching predictions are skipped.
		threads: The number of batches evaluated concurrently.
		related: Other volumes of the case, available to masking nodes.

	Returns:
		The prediction with the input's affine.
	"""
	plan: PatchPlan = planParams.plan(model, volume.spatialShape)
	prediction: AffineVolume = runPatchedInference(model, volume, plan, planParams.batchSize, threads=threads)
	if postprocess is None or not len(postprocess):
		return prediction
	return chainApplyVolume(postprocess, prediction, group=PREDICTION_GROUP, related=related)


def inferCase(
	model: PatchModel,
	collection: DataCollection,
	caseId: str,
	planParams: PlanParams,
	postprocess: Optional[TransformChain] = None,
	*,
	group: str = INPUT_GROUP,
	threads: int = 1,
) -> AffineVolume:
	"""
	Predicts one case of a collection.

	Args:
		model: The model.
		collection: The collection.
		caseId: The case.
		planParams: How to tile the volume.
		postprocess: A chain applied to the prediction.
		group: The group fed to the model.
		threads: The number of batches evaluated concurrently.

	Returns:
		The post-processed prediction with the case's affine.

	Raises:
		UnknownCaseError: The case is not in the collection.
	"""
	volume: AffineVolume = collection.caseVolume(caseId, group)
	logger.info(f"Inferring case {caseId!r} from group {group!r} with shape {volume.shape}.")
	return inferVolume(model, volume, planParams, postprocess, threads=threads, related={group: volume})
