"""NIfTI-1 single-file reading and writing."""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import gzip
import logging
import os
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

# Third-party Modules:
import numpy as np
from knickknacks.typedef import Self

# Local Modules:
from .errors import InvariantViolationError, NeuroPipeError
from .typedef import Float64Array, PathType
from .volume import AffineVolume


HEADER_SIZE: int = 348
VOX_OFFSET: int = 352
MAGIC_SINGLE: bytes = b"n+1\x00"
MAGIC_PAIR: bytes = b"ni1\x00"
GZIP_MAGIC: bytes = b"\x1f\x8b"
NIFTI_UNITS_MM: int = 2
HEADER_DTYPE: np.dtype[Any] = np.dtype(
	[
		("sizeof_hdr", "i4"),  # 0; must be 348
		("data_type", "S10"),  # 4; unused
		("db_name", "S18"),  # 14; unused
		("extents", "i4"),  # 32; unused
		("session_error", "i2"),  # 36; unused
		("regular", "S1"),  # 38; unused
		("dim_info", "u1"),  # 39
		("dim", "i2", (8,)),  # 40
		("intent_p1", "f4"),  # 56
		("intent_p2", "f4"),  # 60
		("intent_p3", "f4"),  # 64
		("intent_code", "i2"),  # 68
		("datatype", "i2"),  # 70
		("bitpix", "i2"),  # 72
		("slice_start", "i2"),  # 74
		("pixdim", "f4", (8,)),  # 76
		("vox_offset", "f4"),  # 108
		("scl_slope", "f4"),  # 112
		("scl_inter", "f4"),  # 116
		("slice_end", "i2"),  # 120
		("slice_code", "u1"),  # 122
		("xyzt_units", "u1"),  # 123
		("cal_max", "f4"),  # 124
		("cal_min", "f4"),  # 128
		("slice_duration", "f4"),  # 132
		("toffset", "f4"),  # 136
		("glmax", "i4"),  # 140
		("glmin", "i4"),  # 144
		("descrip", "S80"),  # 148
		("aux_file", "S24"),  # 228
		("qform_code", "i2"),  # 252
		("sform_code", "i2"),  # 254
		("quatern_b", "f4"),  # 256
		("quatern_c", "f4"),  # 260
		("quatern_d", "f4"),  # 264
		("qoffset_x", "f4"),  # 268
		("qoffset_y", "f4"),  # 272
		("qoffset_z", "f4"),  # 276
		("srow_x", "f4", (4,)),  # 280
		("srow_y", "f4", (4,)),  # 296
		("srow_z", "f4", (4,)),  # 312
		("intent_name", "S16"),  # 328
		("magic", "S4"),  # 344
	]
)
SUPPORTED_DATATYPES: dict[int, np.dtype[Any]] = {
	2: np.dtype(np.uint8),
	4: np.dtype(np.int16),
	8: np.dtype(np.int32),
	16: np.dtype(np.float32),
	64: np.dtype(np.float64),
}


logger: logging.Logger = logging.getLogger(__name__)


class NiftiError(NeuroPipeError):
	"""Implements the base class for NIfTI exceptions."""


class MalformedHeaderError(NiftiError, ValueError):
	"""Raised when the header is not a valid single-file NIfTI-1 header."""


class UnsupportedDatatypeError(NiftiError, ValueError):
	"""Raised when the header declares a datatype this reader does not handle."""

	def __init__(self, datatype: int) -> None:
		"""
		Defines the constructor.

		Args:
			datatype: The NIfTI datatype code.
		"""
		super().__init__(f"Unsupported NIfTI datatype code {datatype}.")
		self.datatype: int = datatype


class TruncatedPayloadError(NiftiError, ValueError):
	"""Raised when the voxel payload is shorter than the header promises."""


class NiftiIOError(NiftiError, OSError):
	"""Raised when a file cannot be read, decompressed or written."""


@dataclass(frozen=True)
class NiftiHeader:
	"""The subset of the NIfTI-1 header this engine reads and writes."""

	dim: tuple[int, ...]
	"""Dimension count followed by up to seven extents."""
	datatype: int = 16
	"""The voxel datatype code."""
	bitpix: int = 32
	"""Bits per voxel."""
	pixdim: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
	"""The qfac value followed by the grid spacings."""
	voxOffset: float = float(VOX_OFFSET)
	"""The byte offset of the voxel data."""
	sclSlope: float = 1.0
	"""The data scaling slope; zero means no scaling."""
	sclInter: float = 0.0
	"""The data scaling intercept."""
	qformCode: int = 0
	"""The quaternion transform code."""
	sformCode: int = 0
	"""The affine transform code."""
	quaternB: float = 0.0
	"""Quaternion b parameter."""
	quaternC: float = 0.0
	"""Quaternion c parameter."""
	quaternD: float = 0.0
	"""Quaternion d parameter."""
	qoffsetX: float = 0.0
	"""Quaternion x offset."""
	qoffsetY: float = 0.0
	"""Quaternion y offset."""
	qoffsetZ: float = 0.0
	"""Quaternion z offset."""
	srowX: tuple[float, ...] = (1.0, 0.0, 0.0, 0.0)
	"""First affine row."""
	srowY: tuple[float, ...] = (0.0, 1.0, 0.0, 0.0)
	"""Second affine row."""
	srowZ: tuple[float, ...] = (0.0, 0.0, 1.0, 0.0)
	"""Third affine row."""
	descrip: str = ""
	"""Free text description."""
	magic: bytes = MAGIC_SINGLE
	"""The format magic."""
	sizeofHdr: int = HEADER_SIZE
	"""The header size, always 348."""
	byteOrder: str = field(default="<", compare=False)
	"""The byte order the header was read with, '<' or '>'."""

	@property
	def ndim(self) -> int:
		"""The number of used dimensions."""
		return self.dim[0]

	@property
	def extents(self) -> tuple[int, ...]:
		"""The used extents."""
		return self.dim[1 : self.ndim + 1]

	@property
	def voxelDtype(self) -> np.dtype[Any]:
		"""The on-disk voxel dtype, byte order included."""
		return SUPPORTED_DATATYPES[self.datatype].newbyteorder(self.byteOrder)

	@classmethod
	def fromBytes(cls: type[Self], data: bytes) -> Self:
		"""
		Parses a header.

		Args:
			data: At least the first 348 bytes of the file.

		Returns:
			The parsed header.

		Raises:
			MalformedHeaderError: The bytes do not form a valid single-file NIfTI-1 header.
			UnsupportedDatatypeError: The datatype code is not supported.
		"""
		if len(data) < HEADER_SIZE:
			raise MalformedHeaderError(f"Header is {len(data)} bytes long, expected {HEADER_SIZE}.")
		byteOrder: str = "<"
		dim0: int = int.from_bytes(data[40:42], byteorder="little", signed=True)
		if not 1 <= dim0 <= 7:
			# The dim[0] heuristic: a value out of range means the file was written big-endian.
			byteOrder = ">"
		record = np.frombuffer(data, dtype=HEADER_DTYPE.newbyteorder(byteOrder), count=1)[0]
		if int(record["sizeof_hdr"]) != HEADER_SIZE:
			raise MalformedHeaderError(f"sizeof_hdr is {int(record['sizeof_hdr'])}, expected {HEADER_SIZE}.")
		magic: bytes = data[344:348]
		if magic == MAGIC_PAIR:
			raise MalformedHeaderError("Header/image file pairs are not supported.")
		if magic != MAGIC_SINGLE:
			raise MalformedHeaderError(f"Invalid magic {magic!r}.")
		dim: tuple[int, ...] = tuple(int(i) for i in record["dim"])
		if dim[0] not in (2, 3, 4):
			raise MalformedHeaderError(f"dim[0] must be 2, 3 or 4, not {dim[0]}.")
		if any(extent < 1 for extent in dim[1 : dim[0] + 1]):
			raise MalformedHeaderError(f"Invalid extents {dim[1 : dim[0] + 1]}.")
		datatype: int = int(record["datatype"])
		if datatype not in SUPPORTED_DATATYPES:
			raise UnsupportedDatatypeError(datatype)
		bitpix: int = int(record["bitpix"])
		if bitpix != SUPPORTED_DATATYPES[datatype].itemsize * 8:
			raise MalformedHeaderError(f"bitpix {bitpix} does not match datatype {datatype}.")
		voxOffset: float = float(record["vox_offset"])
		if not np.isfinite(voxOffset) or voxOffset < HEADER_SIZE:
			raise MalformedHeaderError(f"Invalid vox_offset {voxOffset}.")
		header = cls(
			dim=dim,
			datatype=datatype,
			bitpix=bitpix,
			pixdim=tuple(float(i) for i in record["pixdim"]),
			voxOffset=voxOffset,
			sclSlope=float(record["scl_slope"]),
			sclInter=float(record["scl_inter"]),
			qformCode=int(record["qform_code"]),
			sformCode=int(record["sform_code"]),
			quaternB=float(record["quatern_b"]),
			quaternC=float(record["quatern_c"]),
			quaternD=float(record["quatern_d"]),
			qoffsetX=float(record["qoffset_x"]),
			qoffsetY=float(record["qoffset_y"]),
			qoffsetZ=float(record["qoffset_z"]),
			srowX=tuple(float(i) for i in record["srow_x"]),
			srowY=tuple(float(i) for i in record["srow_y"]),
			srowZ=tuple(float(i) for i in record["srow_z"]),
			descrip=bytes(record["descrip"]).split(b"\x00", 1)[0].decode("latin-1"),
			magic=magic,
			sizeofHdr=HEADER_SIZE,
			byteOrder=byteOrder,
		)
		logger.debug(f"Parsed NIfTI header: dim={dim}, datatype={datatype}, byte order {byteOrder!r}.")
		return header

	def toBytes(self) -> bytes:
		"""
		Encodes the header.

		Returns:
			The 348 header bytes in this header's byte order.
		"""
		record = np.zeros(1, dtype=HEADER_DTYPE.newbyteorder(self.byteOrder))
		record["sizeof_hdr"] = HEADER_SIZE
		record["regular"] = b"r"
		record["dim"] = self.dim
		record["datatype"] = self.datatype
		record["bitpix"] = self.bitpix
		record["pixdim"] = self.pixdim
		record["vox_offset"] = self.voxOffset
		record["scl_slope"] = self.sclSlope
		record["scl_inter"] = self.sclInter
		record["xyzt_units"] = NIFTI_UNITS_MM
		record["descrip"] = self.descrip.encode("latin-1", errors="replace")[:79]
		record["qform_code"] = self.qformCode
		record["sform_code"] = self.sformCode
		record["quatern_b"] = self.quaternB
		record["quatern_c"] = self.quaternC
		record["quatern_d"] = self.quaternD
		record["qoffset_x"] = self.qoffsetX
		record["qoffset_y"] = self.qoffsetY
		record["qoffset_z"] = self.qoffsetZ
		record["srow_x"] = self.srowX
		record["srow_y"] = self.srowY
		record["srow_z"] = self.srowZ
		record["magic"] = self.magic
		return record.tobytes()

	def affine(self) -> Float64Array:
		"""
		Computes the voxel to world transform.

		The sform takes precedence over the qform, which takes precedence over a diagonal built from pixdim.

		Returns:
			The 4x4 affine.
		"""
		affine: Float64Array = np.eye(4, dtype=np.float64)
		if self.sformCode > 0:
			affine[0] = self.srowX
			affine[1] = self.srowY
			affine[2] = self.srowZ
			return affine
		spacing: list[float] = [abs(i) if i != 0 and np.isfinite(i) else 1.0 for i in self.pixdim[1:4]]
		if self.qformCode > 0:
			b, c, d = (float(np.float32(i)) for i in (self.quaternB, self.quaternC, self.quaternD))
			a: float = float(np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d))))
			rotation: Float64Array = np.array(
				[
					[a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
					[2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
					[2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
				],
				dtype=np.float64,
			)
			qfac: float = -1.0 if self.pixdim[0] == -1 else 1.0
			affine[:3, :3] = rotation * np.array([spacing[0], spacing[1], spacing[2] * qfac])
			affine[:3, 3] = (self.qoffsetX, self.qoffsetY, self.qoffsetZ)
			return affine
		affine[:3, :3] = np.diag(spacing)
		return affine


def _isGzip(path: Path, head: bytes) -> bool:
	return path.suffix == ".gz" or head.startswith(GZIP_MAGIC)


def _readRaw(path: PathType) -> bytes:
	filePath = Path(path)
	try:
		raw: bytes = filePath.read_bytes()
	except OSError as e:
		raise NiftiIOError(f"Unable to read {filePath}: {e}") from e
	if _isGzip(filePath, raw[:2]):
		try:
			return gzip.decompress(raw)
		except (OSError, EOFError, zlib.error) as e:
			raise NiftiIOError(f"Unable to decompress {filePath}: {e}") from e
	return raw


def readNiftiHeader(path: PathType) -> NiftiHeader:
	"""
	Reads only the header of a NIfTI-1 file.

	Args:
		path: The file path, optionally gzip-compressed.

	Returns:
		The parsed header.
	"""
	return NiftiHeader.fromBytes(_readRaw(path)[:HEADER_SIZE])


def volumeFromBytes(raw: bytes, *, source: str = "") -> AffineVolume:
	"""
	Decodes an uncompressed single-file NIfTI-1 image.

	Args:
		raw: The file contents.
		source: The source path, stored in the volume metadata.

	Returns:
		The decoded volume.

	Raises:
		TruncatedPayloadError: The payload is shorter than the header promises.
	"""
	header: NiftiHeader = NiftiHeader.fromBytes(raw[:HEADER_SIZE])
	extents: tuple[int, ...] = header.extents
	count: int = int(np.prod(extents, dtype=object))
	dtype: np.dtype[Any] = header.voxelDtype
	start: int = int(header.voxOffset)
	if len(raw) < start + count * dtype.itemsize:
		raise TruncatedPayloadError(
			f"Payload has {max(len(raw) - start, 0)} bytes, expected {count * dtype.itemsize}."
		)
	stored = np.frombuffer(raw, dtype=dtype, count=count, offset=start).reshape(extents, order="F")
	slope: float = header.sclSlope
	inter: float = header.sclInter
	data: np.ndarray[Any, Any]
	if slope != 0 and np.isfinite(slope) and np.isfinite(inter) and (slope != 1 or inter != 0):
		data = (stored.astype(np.float64) * slope + inter).astype(np.float32)
	else:
		data = stored.astype(np.float32)
	if header.ndim in (2, 3):
		data = data[..., np.newaxis]
	meta: dict[str, str] = {"source": source, "description": header.descrip}
	try:
		return AffineVolume(np.ascontiguousarray(data), header.affine(), meta)
	except InvariantViolationError as e:
		raise MalformedHeaderError(f"Header describes an invalid volume: {e}") from e


def readNifti(path: PathType) -> AffineVolume:
	"""
	Reads a single-file NIfTI-1 image.

	Args:
		path: The file path. Gzip compression is detected from the .gz suffix or the leading bytes.

	Returns:
		The volume, with float32 data of shape [X, Y, Z, C] (3D and 4D files) or [X, Y, C] (2D files).
	"""
	logger.debug(f"Reading NIfTI file {path}.")
	return volumeFromBytes(_readRaw(path), source=str(path))


def headerForVolume(volume: AffineVolume, *, byteOrder: str = "<") -> NiftiHeader:
	"""
	Builds the header written for a volume.

	Args:
		volume: The volume to describe.
		byteOrder: The byte order, '<' or '>'.

	Returns:
		A float32 header with the sform set from the volume affine.
	"""
	extents: tuple[int, ...]
	if volume.ndim == 2:
		extents = volume.spatialShape if volume.channels == 1 else (*volume.spatialShape, 1, volume.channels)
	else:
		extents = volume.spatialShape if volume.channels == 1 else volume.shape
	dim: tuple[int, ...] = (len(extents), *extents, *([1] * (7 - len(extents))))
	spacing: list[float] = [float(np.linalg.norm(volume.affine[:3, axis])) for axis in range(3)]
	return NiftiHeader(
		dim=dim,
		datatype=16,
		bitpix=32,
		pixdim=(1.0, *spacing, 1.0, 1.0, 1.0, 1.0),
		voxOffset=float(VOX_OFFSET),
		sclSlope=1.0,
		sclInter=0.0,
		qformCode=0,
		sformCode=1,
		srowX=tuple(float(i) for i in volume.affine[0]),
		srowY=tuple(float(i) for i in volume.affine[1]),
		srowZ=tuple(float(i) for i in volume.affine[2]),
		descrip=volume.meta.get("description", ""),
		byteOrder=byteOrder,
	)


def volumeToBytes(volume: AffineVolume, *, byteOrder: str = "<") -> bytes:
	"""
	Encodes a volume as an uncompressed single-file NIfTI-1 image.

	Args:
		volume: The volume to encode.
		byteOrder: The byte order, '<' or '>'.

	Returns:
		The file contents.
	"""
	volume.validate()
	header: NiftiHeader = headerForVolume(volume, byteOrder=byteOrder)
	payload: bytes = np.asarray(volume.data, dtype=np.dtype(np.float32).newbyteorder(byteOrder)).reshape(
		header.extents
	).tobytes(order="F")
	# Four zero bytes between the header and the payload mean 'no extensions'.
	return header.toBytes() + bytes(VOX_OFFSET - HEADER_SIZE) + payload


def writeNifti(volume: AffineVolume, path: PathType, *, gzip: bool = False, byteOrder: str = "<") -> None:
	"""
	Writes a volume as a single-file float32 NIfTI-1 image.

	Args:
		volume: The volume to write.
		path: The destination path.
		gzip: True to gzip-compress the file.
		byteOrder: The byte order, '<' (default) or '>'.

	Raises:
		NiftiIOError: The file could not be written.
	"""
	data: bytes = volumeToBytes(volume, byteOrder=byteOrder)
	if gzip:
		# A fixed mtime keeps repeated writes byte-identical.
		data = _gzipCompress(data)
	destination = Path(path)
	try:
		destination.parent.mkdir(parents=True, exist_ok=True)
		fd, temporary = tempfile.mkstemp(prefix=f".{destination.name}.", dir=destination.parent)
		try:
			with os.fdopen(fd, "wb") as fileObj:
				fileObj.write(data)
			os.replace(temporary, destination)
		except BaseException:
			Path(temporary).unlink(missing_ok=True)
			raise
	except OSError as e:
		raise NiftiIOError(f"Unable to write {destination}: {e}") from e
	logger.debug(f"Wrote NIfTI file {destination} ({len(data)} bytes).")


def _gzipCompress(data: bytes) -> bytes:
	return gzip.compress(data, mtime=0)

