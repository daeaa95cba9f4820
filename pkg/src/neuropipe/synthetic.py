"""
Synthetic imaging fixtures.

Seeded generators for a disk segmentation task and for a multi-sequence head phantom with a brain
mask and a two-part tumor. They back the toy models installed by `neuropipe model install-toy` and
the end-to-end tests, so neither needs clinical data.
"""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Optional

# Third-party Modules:
import numpy as np

# Local Modules:
from .collection import INPUT_GROUP, LABEL_GROUP, DataCollection, DataGroup
from .errors import InvariantViolationError
from .nifti import writeNifti
from .typedef import Float32Array, Float64Array, IntArray, PathType, ShapeType
from .volume import AffineVolume


DISK_SHAPE: ShapeType = (16, 16)
PHANTOM_SHAPE: ShapeType = (32, 32, 8)
PHANTOM_SPACING: tuple[float, ...] = (1.0, 1.0, 2.0)
PHANTOM_NOISE: float = 0.03
SEQUENCES: tuple[str, ...] = ("flair", "t1pre", "t1post")
LABELS: tuple[str, ...] = ("brain_mask", "whole_tumor", "enhancing_tumor")
# Tissue intensities per sequence: background, skull, brain, edema, enhancing rim, necrotic core.
INTENSITIES: dict[str, tuple[float, ...]] = {
	"flair": (0.0, 0.15, 0.5, 1.0, 0.9, 0.8),
	"t1pre": (0.0, 0.9, 0.6, 0.45, 0.4, 0.3),
	"t1post": (0.0, 0.9, 0.6, 0.45, 1.0, 0.3),
}


logger: logging.Logger = logging.getLogger(__name__)


def _affine(spacing: Sequence[float], origin: Sequence[float]) -> Float64Array:
	affine: Float64Array = np.eye(4, dtype=np.float64)
	for axis, (size, start) in enumerate(zip(spacing, origin)):
		affine[axis, axis] = size
		affine[axis, 3] = start
	return affine


def _radius(shape: ShapeType, center: Sequence[float], radii: Sequence[float]) -> Float64Array:
	grids: Sequence[Float64Array] = np.meshgrid(
		*(np.arange(extent, dtype=np.float64) for extent in shape), indexing="ij"
	)
	squared: Float64Array = np.zeros(shape, dtype=np.float64)
	for grid, middle, radius in zip(grids, center, radii):
		squared += ((grid - middle) / radius) ** 2
	return np.sqrt(squared)


def diskCase(
	rng: np.random.Generator, shape: ShapeType = DISK_SHAPE, *, noise: float = 0.05
) -> tuple[AffineVolume, AffineVolume]:
	"""
	Draws one disk image and its mask.

	Args:
		rng: The random generator.
		shape: The 2D image shape.
		noise: The standard deviation of the added Gaussian noise.

	Returns:
		The single-channel image and the binary mask.
	"""
	if len(shape) != 2:
		raise InvariantViolationError(f"Disk images are 2D, not {shape}.")
	smallest: int = min(shape)
	radius: float = rng.uniform(0.18, 0.3) * smallest
	center: list[float] = [rng.uniform(radius + 1, extent - radius - 1) for extent in shape]
	mask: Float32Array = (_radius(shape, center, (radius, radius)) <= 1.0).astype(np.float32)
	image: Float32Array = (mask + noise * rng.standard_normal(shape)).astype(np.float32)
	return AffineVolume(image[..., np.newaxis]), AffineVolume(mask[..., np.newaxis])


def diskCollection(
	count: int = 4, shape: ShapeType = DISK_SHAPE, *, seed: int = 0, noise: float = 0.05
) -> DataCollection:
	"""
	Builds an in-memory collection of disk cases.

	Args:
		count: The number of cases.
		shape: The 2D image shape.
		seed: The random seed.
		noise: The standard deviation of the added Gaussian noise.

	Returns:
		A collection with an 'image' channel in input_data and a 'disk' channel in ground_truth.
	"""
	rng: np.random.Generator = np.random.default_rng(seed)
	groups: list[DataGroup] = [DataGroup(INPUT_GROUP, ("image",)), DataGroup(LABEL_GROUP, ("disk",))]
	volumes: dict[str, dict[str, list[AffineVolume]]] = {}
	for index in range(count):
		image, mask = diskCase(rng, shape, noise=noise)
		volumes[f"disk{index:02d}"] = {INPUT_GROUP: [image], LABEL_GROUP: [mask]}
	return DataCollection.fromVolumes(groups, volumes)


def headPhantom(
	shape: ShapeType = PHANTOM_SHAPE,
	*,
	seed: int = 0,
	spacing: Optional[Sequence[float]] = None,
	noise: float = PHANTOM_NOISE,
) -> dict[str, AffineVolume]:
	"""
	Draws a head phantom.

	The head is an ellipsoidal brain inside a skull shell. The brain holds an ellipsoidal tumor with
	an enhancing rim around a necrotic core, surrounded by edema that is bright on FLAIR.

	Args:
		shape: The 3D volume shape.
		seed: The random seed.
		spacing: The voxel size in millimeters, defaulting to the phantom spacing.
		noise: The standard deviation of the added Gaussian noise.

	Returns:
		Single-channel volumes keyed flair, t1pre, t1post, brain_mask, whole_tumor, and enhancing_tumor.
	"""
	if len(shape) != 3:
		raise InvariantViolationError(f"Head phantoms are 3D, not {shape}.")
	rng: np.random.Generator = np.random.default_rng(seed)
	extents: Float64Array = np.asarray(shape, dtype=np.float64)
	center: Float64Array = (extents - 1) / 2 + rng.uniform(-0.04, 0.04, 3) * extents
	brainRadii: Float64Array = extents * np.array([0.3, 0.34, 0.36]) * rng.uniform(0.92, 1.05)
	head: Float64Array = _radius(shape, center, brainRadii)
	tumorCenter: Float64Array = center + rng.uniform(-0.35, 0.35, 3) * brainRadii
	tumorRadii: Float64Array = brainRadii * rng.uniform(0.3, 0.4)
	tumor: Float64Array = _radius(shape, tumorCenter, tumorRadii)
	brain = head <= 1.0
	# Tissue classes in painting order; later classes overwrite earlier ones.
	classes: IntArray = np.zeros(shape, dtype=np.intp)
	classes[(head > 1.08) & (head <= 1.3)] = 1
	classes[brain] = 2
	classes[brain & (tumor <= 1.5)] = 3
	classes[brain & (tumor <= 1.0)] = 4
	classes[brain & (tumor <= 0.55)] = 5
	labels: dict[str, Float32Array] = {
		"brain_mask": brain.astype(np.float32),
		"whole_tumor": (classes >= 3).astype(np.float32),
		"enhancing_tumor": (classes == 4).astype(np.float32),
	}
	voxelSize: tuple[float, ...] = tuple(spacing) if spacing is not None else PHANTOM_SPACING
	affine: Float64Array = _affine(voxelSize, [-middle * size for middle, size in zip(center, voxelSize)])
	volumes: dict[str, AffineVolume] = {}
	for sequence in SEQUENCES:
		clean: Float64Array = np.asarray(INTENSITIES[sequence])[classes]
		data: Float32Array = (clean + noise * rng.standard_normal(shape)).astype(np.float32)
		description: dict[str, str] = {"description": f"phantom {sequence}"}
		volumes[sequence] = AffineVolume(data[..., np.newaxis], affine, description)
	for name, mask in labels.items():
		volumes[name] = AffineVolume(mask[..., np.newaxis], affine, {"description": f"phantom {name}"})
	return volumes


def phantomCollection(
	count: int,
	shape: ShapeType = PHANTOM_SHAPE,
	*,
	seed: int = 0,
	inputs: Sequence[str] = ("flair", "t1post"),
	labels: Sequence[str] = ("brain_mask",),
) -> DataCollection:
	"""
	Builds an in-memory collection of head phantoms.

	Inputs may name labels as well as sequences, which is how a cascade stage receives the mask a
	previous stage predicts.

	Args:
		count: The number of cases.
		shape: The 3D volume shape.
		seed: The random seed; case i uses seed + i.
		inputs: The channels of input_data, in order.
		labels: The channels of ground_truth, in order.

	Returns:
		The collection.
	"""
	groups: list[DataGroup] = [DataGroup(INPUT_GROUP, tuple(inputs)), DataGroup(LABEL_GROUP, tuple(labels))]
	volumes: dict[str, dict[str, list[AffineVolume]]] = {}
	for index in range(count):
		phantom: dict[str, AffineVolume] = headPhantom(shape, seed=seed + index)
		volumes[f"phantom{index:02d}"] = {
			INPUT_GROUP: [phantom[name] for name in inputs],
			LABEL_GROUP: [phantom[name] for name in labels],
		}
	return DataCollection.fromVolumes(groups, volumes)


def writePhantom(directory: PathType, shape: ShapeType = PHANTOM_SHAPE, *, seed: int = 0) -> dict[str, Path]:
	"""
	Writes a head phantom as gzipped NIfTI files.

	Args:
		directory: The destination directory.
		shape: The 3D volume shape.
		seed: The random seed.

	Returns:
		The written paths, keyed like `headPhantom`.
	"""
	destination = Path(directory)
	paths: dict[str, Path] = {}
	for name, volume in headPhantom(shape, seed=seed).items():
		paths[name] = destination / f"{name}.nii.gz"
		writeNifti(volume, paths[name], gzip=True)
	logger.info(f"Wrote head phantom {seed} to {destination}.")
	return paths
