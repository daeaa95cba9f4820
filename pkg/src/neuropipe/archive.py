"""
Collection archives (DNAR).

An archive stores every case tensor of a collection as a float32 blob in a checksummed container.
The manifest records the groups and, per case and group, the blob reference, the affine and the
volume metadata. Archived collections read back fully in memory.
"""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import logging
from typing import Any

# Third-party Modules:
import numpy as np

# Local Modules:
from .collection import DataCollection, DataGroup
from .container import ContainerReader, ContainerWriter
from .errors import ContainerError, InvariantViolationError, NeuroPipeError
from .typedef import JSONObjectType, PathType
from .volume import AffineVolume


ARCHIVE_MAGIC: bytes = b"DNAR"
ARCHIVE_VERSION: int = 1
SUPPORTED_ARCHIVE_VERSIONS: frozenset[int] = frozenset((ARCHIVE_VERSION,))


logger: logging.Logger = logging.getLogger(__name__)


class ArchiveIOError(NeuroPipeError, OSError):
	"""Raised when an archive cannot be read or written."""


def archiveManifest(collection: DataCollection, writer: ContainerWriter) -> JSONObjectType:
	"""
	Adds every case tensor to a container writer.

	Args:
		collection: The collection to archive.
		writer: The container writer receiving the blobs.

	Returns:
		The archive manifest.
	"""
	cases: list[JSONObjectType] = []
	for case in collection.cases:
		entries: JSONObjectType = {}
		for group in collection.groups:
			if group.name not in case.sources:
				continue
			volume: AffineVolume = collection.caseVolume(case.caseId, group.name)
			entries[group.name] = {
				"blob": writer.addBlob(volume.data),
				"affine": volume.affine.tolist(),
				"meta": dict(volume.meta),
			}
		cases.append({"id": case.caseId, "groups": entries})
	return {
		"version": writer.version,
		"groups": [
			{"name": group.name, "channel_labels": list(group.channelLabels)} for group in collection.groups
		],
		"cases": cases,
	}


def writeArchive(collection: DataCollection, path: PathType) -> None:
	"""
	Writes a collection to a DNAR archive.

	Args:
		collection: The collection. Every case tensor is loaded.
		path: The destination path.

	Raises:
		ArchiveIOError: The file could not be written.
	"""
	writer = ContainerWriter(ARCHIVE_MAGIC, ARCHIVE_VERSION)
	manifest: JSONObjectType = archiveManifest(collection, writer)
	try:
		writer.write(path, manifest)
	except OSError as e:
		raise ArchiveIOError(f"Unable to write {path}: {e}") from e
	logger.info(f"Archived {len(collection)} cases to {path}.")


def _checkLayout(references: list[tuple[str, JSONObjectType]]) -> None:
	end: int = 0
	for name, reference in references:
		offset: int = int(reference["offset"])
		if offset < end:
			raise ContainerError(f"Blob {name!r} overlaps the preceding blob.")
		end = offset + int(reference["length"])


def collectionFromManifest(reader: ContainerReader) -> DataCollection:
	"""
	Decodes the collection described by an archive manifest.

	Args:
		reader: The opened container.

	Returns:
		The in-memory collection.

	Raises:
		ContainerError: The manifest is malformed.
	"""
	manifest: JSONObjectType = reader.manifest
	try:
		groups: list[DataGroup] = [
			DataGroup(str(item["name"]), tuple(str(label) for label in item["channel_labels"]))
			for item in manifest["groups"]
		]
		channelCounts: dict[str, int] = {group.name: group.channels for group in groups}
		references: list[tuple[str, JSONObjectType]] = []
		rawCases: list[tuple[str, dict[str, Any]]] = []
		for item in manifest["cases"]:
			caseId: str = str(item["id"])
			entries: dict[str, Any] = dict(item["groups"])
			for groupName, entry in entries.items():
				shape: list[int] = list(entry["blob"]["shape"])
				if groupName not in channelCounts or not shape or shape[-1] != channelCounts[groupName]:
					raise ContainerError(f"Blob shape {shape} of {caseId}/{groupName} does not fit.")
				references.append((f"{caseId}/{groupName}", entry["blob"]))
			rawCases.append((caseId, entries))
		_checkLayout(references)
		volumes: dict[str, dict[str, AffineVolume]] = {}
		for caseId, entries in rawCases:
			volumes[caseId] = {}
			for groupName, entry in entries.items():
				data: np.ndarray[Any, Any] = reader.blob(entry["blob"], f"{caseId}/{groupName}")
				affine = np.array(entry["affine"], dtype=np.float64)
				meta: dict[str, str] = {str(k): str(v) for k, v in dict(entry.get("meta", {})).items()}
				volumes[caseId][groupName] = AffineVolume(data, affine, meta)
		return DataCollection.fromStackedVolumes(groups, volumes)
	except (KeyError, TypeError, ValueError, AttributeError) as e:
		if isinstance(e, InvariantViolationError):
			raise ContainerError(f"Archive describes an invalid collection: {e}") from e
		raise ContainerError(f"Malformed archive manifest: {e}") from e


def readArchive(path: PathType) -> DataCollection:
	"""
	Reads a DNAR archive.

	Args:
		path: The archive path.

	Returns:
		An in-memory collection with the archived ids, groups and tensors.

	Raises:
		ArchiveIOError: The file could not be read.
		BadMagicError: The file is not an archive.
		VersionUnsupportedError: The archive version is not supported.
		ChecksumMismatchError: A blob does not match its checksum.
	"""
	try:
		reader: ContainerReader = ContainerReader.fromFile(path, ARCHIVE_MAGIC, SUPPORTED_ARCHIVE_VERSIONS)
	except OSError as e:
		raise ArchiveIOError(f"Unable to read {path}: {e}") from e
	collection: DataCollection = collectionFromManifest(reader)
	logger.debug(f"Read {len(collection)} cases from {path}.")
	return collection
