"""Affine volumes, the image type passed between every stage."""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Optional

# Third-party Modules:
import numpy as np

# Local Modules:
from .errors import InvariantViolationError, ShapeMismatchError
from .typedef import Float32Array, Float64Array, ShapeType


AFFINE_BOTTOM_ROW: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)


logger: logging.Logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AffineVolume:
	"""
	A dense voxel grid with a voxel to world transform.

	Data is stored channels-last, `[X, Y, Z, C]` for 3D volumes and `[X, Y, C]` for 2D volumes.
	"""

	data: Float32Array
	"""The voxel values, always float32."""
	affine: Float64Array = field(default_factory=lambda: np.eye(4, dtype=np.float64))
	"""The 4x4 matrix mapping voxel indices to world millimeters."""
	meta: Mapping[str, str] = field(default_factory=dict)
	"""Free-form string metadata, such as the source path."""

	def __post_init__(self) -> None:
		"""
		Performs additional processing after dataclass initialization.

		Raises:
			InvariantViolationError: The data or affine violate the volume invariants.
		"""
		data = np.asarray(self.data)
		if data.dtype != np.float32:
			data = data.astype(np.float32)
		affine = np.array(self.affine, dtype=np.float64)
		object.__setattr__(self, "data", data)
		object.__setattr__(self, "affine", affine)
		object.__setattr__(self, "meta", dict(self.meta))
		self.validate()

	def validate(self) -> None:
		"""
		Checks the volume invariants.

		Raises:
			InvariantViolationError: An invariant does not hold.
		"""
		if self.data.ndim not in (3, 4):
			raise InvariantViolationError(
				f"Volume data must have shape [X, Y, C] or [X, Y, Z, C], not {self.data.shape}."
			)
		if any(extent < 1 for extent in self.data.shape):
			raise InvariantViolationError(f"Every volume axis must be at least 1, got {self.data.shape}.")
		if self.affine.shape != (4, 4):
			raise InvariantViolationError(f"Affine must be 4x4, not {self.affine.shape}.")
		if tuple(self.affine[3]) != AFFINE_BOTTOM_ROW:
			raise InvariantViolationError(f"Affine bottom row must be [0, 0, 0, 1], not {self.affine[3]}.")
		if not np.all(np.isfinite(self.affine)):
			raise InvariantViolationError("Affine contains non-finite values.")

	@property
	def ndim(self) -> int:
		"""The number of spatial dimensions (2 or 3)."""
		return int(self.data.ndim - 1)

	@property
	def shape(self) -> ShapeType:
		"""The full data shape, channels included."""
		return tuple(int(i) for i in self.data.shape)

	@property
	def spatialShape(self) -> ShapeType:
		"""The data shape without the channel axis."""
		return self.shape[:-1]

	@property
	def channels(self) -> int:
		"""The number of channels."""
		return self.shape[-1]

	@cached_property
	def spacing(self) -> tuple[float, ...]:
		"""The voxel size in millimeters along each spatial axis."""
		return tuple(float(np.linalg.norm(self.affine[:3, axis])) for axis in range(self.ndim))

	def withData(self, data: Any, *, affine: Optional[Float64Array] = None) -> AffineVolume:
		"""
		Creates a volume sharing this volume's geometry and metadata.

		Args:
			data: The new voxel data.
			affine: A replacement affine, or None to keep the current one.

		Returns:
			The new volume.
		"""
		return AffineVolume(data, self.affine if affine is None else affine, self.meta)

	def channel(self, index: int) -> AffineVolume:
		"""
		Extracts a single channel.

		Args:
			index: The channel index.

		Returns:
			A single-channel volume.
		"""
		return self.withData(self.data[..., index : index + 1])

	def copy(self) -> AffineVolume:
		"""
		Copies the volume.

		Returns:
			A volume with independent data.
		"""
		return self.withData(self.data.copy())

	def equals(self, other: AffineVolume, *, affineTolerance: float = 0.0) -> bool:
		"""
		Compares two volumes.

		Args:
			other: The volume to compare with.
			affineTolerance: The absolute tolerance for affine entries.

		Returns:
			True if data are bit-identical and affines agree within tolerance, False otherwise.
		"""
		return (
			self.shape == other.shape
			and self.data.tobytes() == other.data.tobytes()
			and bool(np.allclose(self.affine, other.affine, rtol=0.0, atol=affineTolerance))
		)


def stackChannels(volumes: Sequence[AffineVolume], labels: Optional[Sequence[str]] = None) -> AffineVolume:
	"""
	Stacks single or multi channel volumes along the channel axis.

	Args:
		volumes: The volumes to stack, in channel order.
		labels: Optional channel labels, used in error messages.

	Returns:
		A volume carrying the first volume's affine and metadata.

	Raises:
		ShapeMismatchError: The spatial shapes differ.
	"""
	if not volumes:
		raise InvariantViolationError("At least one volume is required.")
	expected: ShapeType = volumes[0].spatialShape
	for i, volume in enumerate(volumes):
		if volume.spatialShape != expected:
			label: str = labels[i] if labels is not None else str(i)
			raise ShapeMismatchError(
				f"Channel {label!r} has a different spatial shape", expected=expected, got=volume.spatialShape
			)
	if len(volumes) == 1:
		return volumes[0]
	return volumes[0].withData(np.concatenate([volume.data for volume in volumes], axis=-1))
