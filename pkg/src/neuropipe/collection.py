"""Case-oriented data collections."""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import csv
import fnmatch
import logging
import threading
from collections import OrderedDict
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union

# Third-party Modules:
import numpy as np

# Local Modules:
from .errors import InvariantViolationError, NeuroPipeError, ShapeMismatchError
from .nifti import readNifti
from .typedef import Float32Array, IntArray, PathType, ShapeType
from .volume import AffineVolume, stackChannels


INPUT_GROUP: str = "input_data"
LABEL_GROUP: str = "ground_truth"
PREDICTION_GROUP: str = "prediction"


logger: logging.Logger = logging.getLogger(__name__)


SourceType = Union[Path, AffineVolume]
LoaderType = Callable[[Path], AffineVolume]


class CollectionError(NeuroPipeError):
	"""Implements the base class for collection exceptions."""


class MissingChannelError(CollectionError):
	"""Raised when a case directory has no file matching a channel pattern."""

	def __init__(self, caseId: str, group: str, pattern: str) -> None:
		"""
		Defines the constructor.

		Args:
			caseId: The case directory name.
			group: The group the pattern belongs to.
			pattern: The unmatched pattern.
		"""
		super().__init__(f"Case {caseId!r} has no match for {pattern!r} in group {group!r}.")
		self.caseId: str = caseId
		self.group: str = group
		self.pattern: str = pattern


class AmbiguousPatternError(CollectionError):
	"""Raised when a channel pattern matches more than one file in a case directory."""

	def __init__(self, caseId: str, pattern: str, matches: Sequence[str]) -> None:
		"""
		Defines the constructor.

		Args:
			caseId: The case directory name.
			pattern: The ambiguous pattern.
			matches: The matching file names.
		"""
		super().__init__(f"Pattern {pattern!r} matches {len(matches)} files in case {caseId!r}: {matches}.")
		self.caseId: str = caseId
		self.pattern: str = pattern
		self.matches: tuple[str, ...] = tuple(matches)


class EmptyRootError(CollectionError):
	"""Raised when a collection root is not a directory or has no case subdirectories."""


class BadHeaderError(CollectionError):
	"""Raised when a CSV header is not of the form `case,<group>:<channel>,...`."""


class MissingPathError(CollectionError):
	"""Raised when a CSV row is missing a path."""

	def __init__(self, row: int, column: str) -> None:
		"""
		Defines the constructor.

		Args:
			row: The 1-based line number of the row.
			column: The header of the empty column.
		"""
		super().__init__(f"Row {row} has no path for column {column!r}.")
		self.row: int = row
		self.column: str = column


class EmptyCollectionError(CollectionError):
	"""Raised when sampling from a collection without cases."""


class UnknownCaseError(CollectionError, KeyError):
	"""Raised when a case id is not in the collection."""


class UnknownGroupError(CollectionError, KeyError):
	"""Raised when a group name is not declared by the collection."""


@dataclass(frozen=True)
class DataGroup:
	"""A named role within every case, such as network input or ground truth."""

	name: str
	channelLabels: tuple[str, ...]

	def __post_init__(self) -> None:
		"""
		Performs additional processing after dataclass initialization.

		Raises:
			InvariantViolationError: The name is empty or the channel labels are missing or repeated.
		"""
		object.__setattr__(self, "channelLabels", tuple(self.channelLabels))
		if not self.name:
			raise InvariantViolationError("Group name must not be empty.")
		if not self.channelLabels:
			raise InvariantViolationError(f"Group {self.name!r} must have at least one channel label.")
		if len(set(self.channelLabels)) != len(self.channelLabels):
			raise InvariantViolationError(f"Group {self.name!r} repeats a channel label.")

	@property
	def channels(self) -> int:
		"""The number of channels."""
		return len(self.channelLabels)


@dataclass(frozen=True)
class Case:
	"""One subject's channel sources, by group."""

	caseId: str
	sources: Mapping[str, tuple[SourceType, ...]]

	def __post_init__(self) -> None:
		"""Performs additional processing after dataclass initialization."""
		object.__setattr__(self, "sources", {group: tuple(items) for group, items in self.sources.items()})


@dataclass(frozen=True)
class GroupAttributes:
	"""Derived properties of one group across every case."""

	shape: Optional[ShapeType]
	"""The stacked shape shared by every case, or None if shapes differ."""
	dimension: int
	"""The number of spatial dimensions."""
	intensityRange: tuple[float, float]
	"""The minimum and maximum voxel value."""


class SamplingMode(str, Enum):
	"""How case indices are drawn across groups."""

	PAIRED = "paired"
	UNPAIRED = "unpaired"


@dataclass
class _CacheState:
	volumes: OrderedDict[str, dict[str, AffineVolume]] = field(default_factory=OrderedDict)
	keyLocks: dict[tuple[str, str], threading.Lock] = field(default_factory=dict)
	attributes: dict[str, GroupAttributes] = field(default_factory=dict)


class DataCollection:
	"""
	An ordered set of cases with named groups.

	Volumes are only read when a case tensor is first requested. Loaded tensors are cached, optionally
	capped at a number of cases with least recently used eviction.
	"""

	def __init__(
		self,
		groups: Iterable[DataGroup],
		cases: Iterable[Case],
		*,
		maxCachedCases: Optional[int] = None,
		loader: LoaderType = readNifti,
	) -> None:
		"""
		Defines the constructor.

		Args:
			groups: The declared groups.
			cases: The cases, in order.
			maxCachedCases: The maximum number of cases kept in the cache, or None for no limit.
			loader: Reads a file source into a volume.

		Raises:
			InvariantViolationError: Groups or cases are inconsistent.
		"""
		self.groups: tuple[DataGroup, ...] = tuple(groups)
		self.cases: tuple[Case, ...] = tuple(cases)
		self.maxCachedCases: Optional[int] = maxCachedCases
		self.loader: LoaderType = loader
		self._groupMap: dict[str, DataGroup] = {}
		for group in self.groups:
			if group.name in self._groupMap:
				raise InvariantViolationError(f"Duplicate group {group.name!r}.")
			self._groupMap[group.name] = group
		self._caseMap: dict[str, Case] = {}
		for case in self.cases:
			if case.caseId in self._caseMap:
				raise InvariantViolationError(f"Duplicate case id {case.caseId!r}.")
			for name, items in case.sources.items():
				if name not in self._groupMap:
					raise InvariantViolationError(f"Case {case.caseId!r} uses undeclared group {name!r}.")
				if len(items) != self._groupMap[name].channels:
					raise InvariantViolationError(
						f"Case {case.caseId!r} has {len(items)} sources for group {name!r}, "
						+ f"expected {self._groupMap[name].channels}."
					)
			self._caseMap[case.caseId] = case
		if maxCachedCases is not None and maxCachedCases < 1:
			raise InvariantViolationError("maxCachedCases must be at least 1.")
		self._lock: threading.Lock = threading.Lock()
		self._cache: _CacheState = _CacheState()

	def __len__(self) -> int:
		return len(self.cases)

	def __iter__(self) -> Iterator[str]:
		return iter(self.caseIds)

	def __contains__(self, caseId: object) -> bool:
		return caseId in self._caseMap

	def __repr__(self) -> str:
		return f"{type(self).__name__}(groups={[g.name for g in self.groups]}, cases={len(self.cases)})"

	@property
	def caseIds(self) -> tuple[str, ...]:
		"""The case ids, in order."""
		return tuple(case.caseId for case in self.cases)

	@property
	def groupNames(self) -> tuple[str, ...]:
		"""The group names, in declaration order."""
		return tuple(group.name for group in self.groups)

	def group(self, name: str) -> DataGroup:
		"""
		Looks up a group.

		Args:
			name: The group name.

		Returns:
			The group.

		Raises:
			UnknownGroupError: The group is not declared.
		"""
		try:
			return self._groupMap[name]
		except KeyError:
			raise UnknownGroupError(f"Unknown group {name!r}.") from None

	def case(self, caseId: str) -> Case:
		"""
		Looks up a case.

		Args:
			caseId: The case id.

		Returns:
			The case.

		Raises:
			UnknownCaseError: The case is not in the collection.
		"""
		try:
			return self._caseMap[caseId]
		except KeyError:
			raise UnknownCaseError(f"Unknown case {caseId!r}.") from None

	def isCached(self, caseId: str, groupName: str) -> bool:
		"""
		Determines whether a case tensor is cached.

		Args:
			caseId: The case id.
			groupName: The group name.

		Returns:
			True if the stacked tensor is in the cache, False otherwise.
		"""
		with self._lock:
			return groupName in self._cache.volumes.get(caseId, {})

	def _load(self, source: SourceType) -> AffineVolume:
		if isinstance(source, AffineVolume):
			return source
		return self.loader(source)

	def caseVolume(self, caseId: str, groupName: str) -> AffineVolume:
		"""
		Loads and stacks the channels of a case group.

		Concurrent callers asking for the same tensor share a single load.

		Args:
			caseId: The case id.
			groupName: The group name.

		Returns:
			A volume with the channels stacked in channel label order, carrying the first channel's affine.

		Raises:
			UnknownGroupError: The case has no sources for the group.
			ShapeMismatchError: The channel volumes differ in spatial shape.
		"""
		case: Case = self.case(caseId)
		group: DataGroup = self.group(groupName)
		if groupName not in case.sources:
			raise UnknownGroupError(f"Case {caseId!r} has no group {groupName!r}.")
		key: tuple[str, str] = (caseId, groupName)
		with self._lock:
			cached: Optional[AffineVolume] = self._cache.volumes.get(caseId, {}).get(groupName)
			if cached is not None:
				self._cache.volumes.move_to_end(caseId)
				return cached
			keyLock: threading.Lock = self._cache.keyLocks.setdefault(key, threading.Lock())
		with keyLock:
			with self._lock:
				cached = self._cache.volumes.get(caseId, {}).get(groupName)
			if cached is not None:
				return cached
			logger.debug(f"Loading {groupName!r} for case {caseId!r}.")
			volumes: list[AffineVolume] = [self._load(source) for source in case.sources[groupName]]
			stacked: AffineVolume = stackChannels(volumes, group.channelLabels)
			with self._lock:
				self._cache.volumes.setdefault(caseId, {})[groupName] = stacked
				self._cache.volumes.move_to_end(caseId)
				if self.maxCachedCases is not None:
					while len(self._cache.volumes) > self.maxCachedCases:
						evicted, _ = self._cache.volumes.popitem(last=False)
						logger.debug(f"Evicted case {evicted!r} from the cache.")
				self._cache.keyLocks.pop(key, None)
			return stacked

	def caseTensor(self, caseId: str, groupName: str) -> Float32Array:
		"""
		Loads and stacks the channels of a case group.

		Args:
			caseId: The case id.
			groupName: The group name.

		Returns:
			The stacked tensor, [X, Y, Z, C] or [X, Y, C].
		"""
		return self.caseVolume(caseId, groupName).data

	def attributes(self, groupName: str) -> GroupAttributes:
		"""
		Computes the attributes of a group, loading every case on first request.

		Args:
			groupName: The group name.

		Returns:
			The attributes.
		"""
		self.group(groupName)
		with self._lock:
			cached: Optional[GroupAttributes] = self._cache.attributes.get(groupName)
		if cached is not None:
			return cached
		shapes: set[ShapeType] = set()
		dimension: int = 0
		low: float = float("inf")
		high: float = float("-inf")
		for case in self.cases:
			if groupName not in case.sources:
				continue
			volume: AffineVolume = self.caseVolume(case.caseId, groupName)
			shapes.add(volume.shape)
			dimension = volume.ndim
			low = min(low, float(volume.data.min()))
			high = max(high, float(volume.data.max()))
		result = GroupAttributes(
			shape=next(iter(shapes)) if len(shapes) == 1 else None,
			dimension=dimension,
			intensityRange=(low, high),
		)
		with self._lock:
			self._cache.attributes[groupName] = result
		return result

	def subset(self, caseIds: Iterable[str]) -> DataCollection:
		"""
		Creates a collection with a subset of the cases.

		Args:
			caseIds: The case ids to keep, in the order given.

		Returns:
			A new collection sharing sources and loader, with an empty cache.
		"""
		return DataCollection(
			self.groups,
			[self.case(caseId) for caseId in caseIds],
			maxCachedCases=self.maxCachedCases,
			loader=self.loader,
		)

	@classmethod
	def fromVolumes(
		cls,
		groups: Iterable[DataGroup],
		volumes: Mapping[str, Mapping[str, Sequence[AffineVolume]]],
	) -> DataCollection:
		"""
		Builds an in-memory collection.

		Args:
			groups: The declared groups.
			volumes: Channel volumes by case id then group name.

		Returns:
			The collection.
		"""
		return cls(groups, [Case(caseId, dict(byGroup)) for caseId, byGroup in volumes.items()])

	@classmethod
	def fromStackedVolumes(
		cls,
		groups: Iterable[DataGroup],
		volumes: Mapping[str, Mapping[str, AffineVolume]],
	) -> DataCollection:
		"""
		Builds an in-memory collection from already stacked group volumes.

		Args:
			groups: The declared groups.
			volumes: Stacked volumes by case id then group name.

		Returns:
			The collection, with one channel source per channel of each stacked volume.
		"""
		return cls.fromVolumes(
			groups,
			{
				caseId: {
					name: [stacked.channel(i) for i in range(stacked.channels)]
					for name, stacked in byGroup.items()
				}
				for caseId, byGroup in volumes.items()
			},
		)


def _caseDirectories(root: Path) -> list[Path]:
	if not root.is_dir():
		raise EmptyRootError(f"{root} is not a directory.")
	directories: list[Path] = sorted(
		(item for item in root.iterdir() if item.is_dir() and not item.name.startswith(".")),
		key=lambda item: item.name,
	)
	if not directories:
		raise EmptyRootError(f"{root} has no case subdirectories.")
	return directories


def collectionFromDirectory(
	root: PathType,
	patternMap: Mapping[str, Sequence[str]],
	*,
	channelLabels: Optional[Mapping[str, Sequence[str]]] = None,
	loader: LoaderType = readNifti,
) -> DataCollection:
	"""
	Builds a collection from one subdirectory per case.

	Args:
		root: The directory holding the case subdirectories.
		patternMap: Shell-style file name patterns by group, one per channel.
		channelLabels: Channel labels by group. Defaults to the patterns with wildcards stripped.
		loader: Reads a file source into a volume.

	Returns:
		The collection, with cases ordered by id and nothing loaded.

	Raises:
		MissingChannelError: A pattern matches no file in a case directory.
		AmbiguousPatternError: A pattern matches more than one file in a case directory.
		EmptyRootError: The root is not a directory or has no case subdirectories.
	"""
	rootPath: Path = Path(root).resolve()
	groups: list[DataGroup] = []
	for name, patterns in patternMap.items():
		if channelLabels is not None and name in channelLabels:
			labels: tuple[str, ...] = tuple(channelLabels[name])
		else:
			labels = tuple(pattern.strip("*?[]") or pattern for pattern in patterns)
		groups.append(DataGroup(name, labels))
	cases: list[Case] = []
	for directory in _caseDirectories(rootPath):
		fileNames: list[str] = sorted(item.name for item in directory.iterdir() if item.is_file())
		sources: dict[str, tuple[SourceType, ...]] = {}
		for name, patterns in patternMap.items():
			found: list[SourceType] = []
			for pattern in patterns:
				matches: list[str] = fnmatch.filter(fileNames, pattern)
				if not matches:
					raise MissingChannelError(directory.name, name, pattern)
				if len(matches) > 1:
					raise AmbiguousPatternError(directory.name, pattern, matches)
				found.append(directory / matches[0])
			sources[name] = tuple(found)
		cases.append(Case(directory.name, sources))
	logger.debug(f"Found {len(cases)} cases under {rootPath}.")
	return DataCollection(groups, cases, loader=loader)


def _parseCsvHeader(header: Sequence[str]) -> list[tuple[str, str]]:
	if not header or header[0].strip() != "case" or len(header) < 2:
		raise BadHeaderError(f"CSV header must start with 'case' followed by group columns, got {header}.")
	columns: list[tuple[str, str]] = []
	for cell in header[1:]:
		groupName, separator, label = cell.strip().partition(":")
		if not separator or not groupName or not label:
			raise BadHeaderError(f"Column {cell!r} is not of the form <group>:<channel>.")
		if (groupName, label) in columns:
			raise BadHeaderError(f"Duplicate column {cell!r}.")
		columns.append((groupName, label))
	return columns


def collectionFromCsv(path: PathType, *, loader: LoaderType = readNifti) -> DataCollection:
	"""
	Builds a collection from a CSV list of file paths.

	The header row is `case,<group>:<channel>,...`; column order defines channel stacking order.
	Relative paths resolve against the CSV file's directory. Quoting is not supported, so paths
	containing commas are rejected.

	Args:
		path: The CSV file path.
		loader: Reads a file source into a volume.

	Returns:
		The collection, with cases ordered by id and nothing loaded.

	Raises:
		BadHeaderError: The header row is malformed.
		MissingPathError: A row has an empty cell.
	"""
	csvPath: Path = Path(path).resolve()
	with csvPath.open("r", encoding="utf-8", newline="") as fileObj:
		rows: list[list[str]] = list(csv.reader(fileObj, quoting=csv.QUOTE_NONE))
	if not rows:
		raise BadHeaderError(f"{csvPath} is empty.")
	header: list[str] = rows[0]
	columns: list[tuple[str, str]] = _parseCsvHeader(header)
	labels: dict[str, list[str]] = {}
	for groupName, label in columns:
		labels.setdefault(groupName, []).append(label)
	cases: list[Case] = []
	for lineNumber, row in enumerate(rows[1:], start=2):
		if not any(cell.strip() for cell in row):
			continue
		if len(row) > len(header):
			raise BadHeaderError(f"Row {lineNumber} has {len(row)} cells for {len(header)} columns.")
		cells: list[str] = [cell.strip() for cell in row] + [""] * (len(header) - len(row))
		if not cells[0]:
			raise MissingPathError(lineNumber, "case")
		sources: dict[str, list[SourceType]] = {}
		for (groupName, _), column, cell in zip(columns, header[1:], cells[1:]):
			if not cell:
				raise MissingPathError(lineNumber, column.strip())
			sources.setdefault(groupName, []).append((csvPath.parent / cell).resolve())
		cases.append(Case(cells[0], {name: tuple(items) for name, items in sources.items()}))
	cases.sort(key=lambda case: case.caseId)
	groups: list[DataGroup] = [DataGroup(name, tuple(items)) for name, items in labels.items()]
	return DataCollection(groups, cases, loader=loader)


def drawBatchIndices(
	caseCount: int,
	batchSize: int,
	mode: Union[SamplingMode, str],
	groupNames: Sequence[str],
	seed: int,
) -> dict[str, IntArray]:
	"""
	Draws case indices for a batch, with replacement.

	Args:
		caseCount: The number of cases.
		batchSize: The number of batch slots.
		mode: Paired draws one index per slot shared by every group; unpaired draws per group.
		groupNames: The groups to draw for, in order.
		seed: The random seed.

	Returns:
		The drawn indices by group name.

	Raises:
		EmptyCollectionError: There are no cases.
	"""
	if caseCount < 1:
		raise EmptyCollectionError("Cannot sample from a collection without cases.")
	if batchSize < 1:
		raise InvariantViolationError(f"Batch size must be at least 1, not {batchSize}.")
	rng = np.random.default_rng(seed)
	if SamplingMode(mode) is SamplingMode.PAIRED:
		shared: IntArray = rng.integers(0, caseCount, size=batchSize)
		return {name: shared for name in groupNames}
	return {name: rng.integers(0, caseCount, size=batchSize) for name in groupNames}


def sampleBatch(
	collection: DataCollection,
	batchSize: int,
	mode: Union[SamplingMode, str],
	seed: int,
	*,
	groupNames: Optional[Sequence[str]] = None,
) -> dict[str, Float32Array]:
	"""
	Samples a batch of case tensors.

	Args:
		collection: The collection.
		batchSize: The number of samples.
		mode: Paired or unpaired sampling.
		seed: The random seed.
		groupNames: The groups to sample, defaulting to every declared group.

	Returns:
		Batched tensors [B, ...] by group name.

	Raises:
		ShapeMismatchError: Sampled tensors of one group differ in shape.
	"""
	names: Sequence[str] = collection.groupNames if groupNames is None else groupNames
	indices: dict[str, IntArray] = drawBatchIndices(len(collection), batchSize, mode, names, seed)
	batch: dict[str, Float32Array] = {}
	for name in names:
		tensors: list[Float32Array] = [
			collection.caseTensor(collection.cases[int(i)].caseId, name) for i in indices[name]
		]
		shapes: set[tuple[int, ...]] = {tensor.shape for tensor in tensors}
		if len(shapes) > 1:
			raise ShapeMismatchError(f"Group {name!r} has cases of differing shapes: {sorted(shapes)}")
		batch[name] = np.stack(tensors)
	return batch
