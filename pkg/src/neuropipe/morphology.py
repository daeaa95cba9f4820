"""Connected component post-processing for binary volumes."""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import logging
from typing import Optional

# Third-party Modules:
import numpy as np
from scipy import ndimage

# Local Modules:
from .errors import InvariantViolationError, NeuroPipeError
from .typedef import BoolArray, IntArray
from .volume import AffineVolume


CONNECTIVITY_RANKS: dict[int, dict[int, int]] = {
	2: {4: 1, 8: 2},
	3: {6: 1, 26: 3},
}
COMPLEMENT_CONNECTIVITY: dict[int, int] = {4: 8, 8: 4, 6: 26, 26: 6}
DEFAULT_CONNECTIVITY: dict[int, int] = {2: 4, 3: 6}


logger: logging.Logger = logging.getLogger(__name__)


class NonBinaryMaskError(NeuroPipeError, ValueError):
	"""Raised when a volume expected to hold only 0 and 1 holds other values."""


def requireBinary(volume: AffineVolume, what: str = "Volume") -> None:
	"""
	Checks that a volume only holds 0 and 1.

	Args:
		volume: The volume.
		what: A description used in the error message.

	Raises:
		NonBinaryMaskError: Another value occurs.
	"""
	if not np.all((volume.data == 0) | (volume.data == 1)):
		raise NonBinaryMaskError(f"{what} must only contain 0 and 1.")


def structuringElement(ndim: int, connectivity: Optional[int]) -> tuple[int, BoolArray]:
	"""
	Builds the neighborhood for a connectivity.

	Args:
		ndim: The number of spatial dimensions.
		connectivity: 4 or 8 in 2D, 6 or 26 in 3D, or None for the default (4 or 6).

	Returns:
		The resolved connectivity and the structuring element.

	Raises:
		InvariantViolationError: The connectivity does not exist for the dimension.
	"""
	if connectivity is None:
		connectivity = DEFAULT_CONNECTIVITY[ndim]
	ranks: dict[int, int] = CONNECTIVITY_RANKS[ndim]
	if connectivity not in ranks:
		raise InvariantViolationError(
			f"Connectivity {connectivity} is not valid in {ndim}D; use one of {sorted(ranks)}."
		)
	return connectivity, ndimage.generate_binary_structure(ndim, ranks[connectivity])


def _removeIslands(mask: BoolArray, minVoxels: int, structure: BoolArray) -> BoolArray:
	labels: IntArray
	labels, count = ndimage.label(mask, structure=structure)
	if count == 0:
		return mask
	sizes: IntArray = np.bincount(labels.ravel())
	keep: BoolArray = sizes >= minVoxels
	keep[0] = False
	return keep[labels]


def _fillHoles(mask: BoolArray, structure: BoolArray) -> BoolArray:
	background: IntArray
	background, count = ndimage.label(~mask, structure=structure)
	if count == 0:
		return mask
	border: set[int] = set()
	for axis in range(mask.ndim):
		border.update(np.unique(np.take(background, [0, -1], axis=axis)).tolist())
	enclosed: BoolArray = ~np.isin(background, sorted(border)) & (background > 0)
	return mask | enclosed


def islandRemoval(volume: AffineVolume, minVoxels: int, connectivity: Optional[int] = None) -> AffineVolume:
	"""
	Removes small connected foreground components.

	Args:
		volume: A binary volume. Channels are processed independently.
		minVoxels: Components with fewer voxels are cleared.
		connectivity: 4 or 8 in 2D, 6 or 26 in 3D. Defaults to 4 or 6.

	Returns:
		The cleaned binary volume.

	Raises:
		NonBinaryMaskError: The volume is not binary.
	"""
	if minVoxels < 1:
		raise InvariantViolationError(f"minVoxels must be at least 1, not {minVoxels}.")
	requireBinary(volume)
	connectivity, structure = structuringElement(volume.ndim, connectivity)
	channels: list[BoolArray] = [
		_removeIslands(volume.data[..., i] > 0, minVoxels, structure) for i in range(volume.channels)
	]
	result: AffineVolume = volume.withData(np.stack(channels, axis=-1).astype(np.float32))
	logger.debug(
		f"Island removal ({connectivity}-connected, min {minVoxels}) cleared "
		+ f"{int(volume.data.sum() - result.data.sum())} voxels."
	)
	return result


def holeFill(volume: AffineVolume, connectivity: Optional[int] = None) -> AffineVolume:
	"""
	Fills background cavities that do not reach the volume border.

	Background components are found with the complement of the foreground connectivity,
	26 for 6, 8 for 4 and vice versa.

	Args:
		volume: A binary volume. Channels are processed independently.
		connectivity: The foreground connectivity, 4 or 8 in 2D, 6 or 26 in 3D. Defaults to 4 or 6.

	Returns:
		The filled binary volume.

	Raises:
		NonBinaryMaskError: The volume is not binary.
	"""
	requireBinary(volume)
	connectivity, _ = structuringElement(volume.ndim, connectivity)
	_, structure = structuringElement(volume.ndim, COMPLEMENT_CONNECTIVITY[connectivity])
	channels: list[BoolArray] = [
		_fillHoles(volume.data[..., i] > 0, structure) for i in range(volume.channels)
	]
	return volume.withData(np.stack(channels, axis=-1).astype(np.float32))
