"""
Checksummed binary containers.

Layout shared by the collection archive (DNAR) and model (DNMD) formats:

- 4 magic bytes.
- Format version, unsigned 32-bit little-endian.
- Manifest length in bytes, unsigned 64-bit little-endian.
- The manifest, UTF-8 JSON.
- Zero padding to the next 64-byte boundary, where the data section starts.
- Contiguous little-endian blobs, each starting on a 64-byte boundary.

Blob references in the manifest hold the offset relative to the data section, the byte length,
the dtype, the shape and the CRC32 of the blob bytes.
"""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import json
import logging
import os
import struct
import tempfile
import zlib
from collections.abc import Collection
from pathlib import Path
from typing import Any

# Third-party Modules:
import numpy as np

# Local Modules:
from .errors import (
	BadMagicError,
	ChecksumMismatchError,
	ContainerError,
	TruncatedFileError,
	VersionUnsupportedError,
)
from .typedef import JSONMappingType, JSONObjectType, PathType


ALIGNMENT: int = 64
PREAMBLE: struct.Struct = struct.Struct("<4sIQ")
BLOB_DTYPES: frozenset[str] = frozenset(("<f4", "<f8", "<i8", "|u1"))


logger: logging.Logger = logging.getLogger(__name__)


def alignUp(offset: int, alignment: int = ALIGNMENT) -> int:
	"""
	Rounds an offset up to a multiple of the alignment.

	Args:
		offset: The offset.
		alignment: The alignment.

	Returns:
		The aligned offset.
	"""
	return (offset + alignment - 1) // alignment * alignment


class ContainerWriter:
	"""Collects blobs and writes a container file."""

	def __init__(self, magic: bytes, version: int) -> None:
		"""
		Defines the constructor.

		Args:
			magic: The 4 magic bytes.
			version: The format version.
		"""
		if len(magic) != 4:
			raise ValueError(f"Magic must be 4 bytes, not {magic!r}.")
		self.magic: bytes = magic
		self.version: int = version
		self._chunks: list[bytes] = []
		self._size: int = 0

	def addBlob(self, array: np.ndarray[Any, Any]) -> JSONObjectType:
		"""
		Appends an array to the data section.

		Args:
			array: The array. Floating point arrays keep their precision, stored little-endian.

		Returns:
			The blob reference to embed in the manifest.
		"""
		dtype: np.dtype[Any] = np.dtype(array.dtype).newbyteorder("<")
		if dtype.str not in BLOB_DTYPES:
			raise ValueError(f"Unsupported blob dtype {array.dtype}.")
		payload: bytes = np.ascontiguousarray(array, dtype=dtype).tobytes()
		offset: int = alignUp(self._size)
		if offset > self._size:
			self._chunks.append(bytes(offset - self._size))
		self._chunks.append(payload)
		self._size = offset + len(payload)
		return {
			"offset": offset,
			"length": len(payload),
			"dtype": dtype.str,
			"shape": [int(i) for i in array.shape],
			"crc32": zlib.crc32(payload),
		}

	def toBytes(self, manifest: JSONMappingType) -> bytes:
		"""
		Encodes the container.

		Args:
			manifest: The manifest, including the blob references.

		Returns:
			The container bytes.
		"""
		manifestBytes: bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
		head: bytes = PREAMBLE.pack(self.magic, self.version, len(manifestBytes)) + manifestBytes
		return head + bytes(alignUp(len(head)) - len(head)) + b"".join(self._chunks)

	def write(self, path: PathType, manifest: JSONMappingType) -> None:
		"""
		Writes the container atomically.

		Args:
			path: The destination path.
			manifest: The manifest, including the blob references.
		"""
		data: bytes = self.toBytes(manifest)
		destination = Path(path)
		destination.parent.mkdir(parents=True, exist_ok=True)
		fd, temporary = tempfile.mkstemp(prefix=f".{destination.name}.", dir=destination.parent)
		try:
			with os.fdopen(fd, "wb") as fileObj:
				fileObj.write(data)
			os.replace(temporary, destination)
		except BaseException:
			Path(temporary).unlink(missing_ok=True)
			raise
		logger.debug(f"Wrote {self.magic!r} container {destination} ({len(data)} bytes).")


class ContainerReader:
	"""Parses a container held in memory."""

	def __init__(self, data: bytes, magic: bytes, supportedVersions: Collection[int]) -> None:
		"""
		Defines the constructor.

		Args:
			data: The container bytes.
			magic: The expected magic bytes.
			supportedVersions: The format versions this reader understands.

		Raises:
			BadMagicError: The magic bytes differ.
			VersionUnsupportedError: The version is not supported.
			TruncatedFileError: The data ends before the manifest does.
			ContainerError: The manifest is not valid JSON.
		"""
		if len(data) < PREAMBLE.size:
			if not magic.startswith(data[:4]):
				raise BadMagicError(f"Expected magic {magic!r}, got {data[:4]!r}.")
			raise TruncatedFileError(f"Container is only {len(data)} bytes long.")
		foundMagic, version, manifestLength = PREAMBLE.unpack_from(data)
		if foundMagic != magic:
			raise BadMagicError(f"Expected magic {magic!r}, got {foundMagic!r}.")
		if version not in supportedVersions:
			raise VersionUnsupportedError(f"Version {version} of {magic!r} is not supported.")
		manifestEnd: int = PREAMBLE.size + manifestLength
		if manifestEnd > len(data):
			raise TruncatedFileError(f"Manifest runs past the end of the file ({manifestEnd} > {len(data)}).")
		try:
			manifest: Any = json.loads(data[PREAMBLE.size : manifestEnd].decode("utf-8"))
		except (UnicodeDecodeError, json.JSONDecodeError) as e:
			raise ContainerError(f"Corrupt manifest: {e}") from e
		if not isinstance(manifest, dict):
			raise ContainerError("Manifest must be a JSON object.")
		self.version: int = version
		self.manifest: JSONObjectType = manifest
		self._data: bytes = data
		self._dataStart: int = alignUp(manifestEnd)

	@classmethod
	def fromFile(cls, path: PathType, magic: bytes, supportedVersions: Collection[int]) -> ContainerReader:
		"""
		Reads a container file.

		Args:
			path: The file path.
			magic: The expected magic bytes.
			supportedVersions: The format versions this reader understands.

		Returns:
			The reader.
		"""
		return cls(Path(path).read_bytes(), magic, supportedVersions)

	def blob(self, reference: JSONMappingType, name: str) -> np.ndarray[Any, Any]:
		"""
		Decodes and verifies a blob.

		Args:
			reference: The blob reference from the manifest.
			name: A name for the blob, used in error messages.

		Returns:
			A writable array in native byte order.

		Raises:
			ContainerError: The reference is malformed.
			TruncatedFileError: The blob runs past the end of the file.
			ChecksumMismatchError: The blob bytes do not match the recorded CRC32.
		"""
		try:
			offset: int = int(reference["offset"])
			length: int = int(reference["length"])
			dtypeStr: str = str(reference["dtype"])
			shape: tuple[int, ...] = tuple(int(i) for i in reference["shape"])
			expected: int = int(reference["crc32"])
		except (KeyError, TypeError, ValueError) as e:
			raise ContainerError(f"Malformed blob reference for {name!r}: {e}") from e
		if dtypeStr not in BLOB_DTYPES or offset < 0 or length < 0 or any(i < 0 for i in shape):
			raise ContainerError(f"Malformed blob reference for {name!r}.")
		dtype: np.dtype[Any] = np.dtype(dtypeStr)
		if int(np.prod(shape, dtype=object)) * dtype.itemsize != length:
			raise ContainerError(f"Blob {name!r} length {length} does not match shape {shape}.")
		start: int = self._dataStart + offset
		if start + length > len(self._data):
			raise TruncatedFileError(f"Blob {name!r} runs past the end of the file.")
		payload: bytes = self._data[start : start + length]
		got: int = zlib.crc32(payload)
		if got != expected:
			raise ChecksumMismatchError(name, f"{expected:08x}", f"{got:08x}")
		return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
