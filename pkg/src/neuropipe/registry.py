"""
The model registry.

Trained models live outside the package. A manifest names each model with its download URL and
sha256 digest; `ModelRegistry.fetch` downloads into a local cache, verifies the digest before the
file becomes visible, and serves later requests from the cache.
"""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import hashlib
import json
import logging
import os
import re
import shutil
import tempfile
import threading
import urllib.parse
import urllib.request
from collections.abc import Mapping
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, BinaryIO, Optional, Protocol

# Third-party Modules:
import requests

# Local Modules:
from .errors import ChecksumMismatchError, ConfigError, NeuroPipeError
from .typedef import JSONMappingType, JSONObjectType, PathType


CACHE_VARIABLE: str = "NEUROPIPE_CACHE"
MANIFEST_VARIABLE: str = "NEUROPIPE_MANIFEST"
DEFAULT_CACHE: Path = Path("~/.cache/neuropipe")
MANIFEST_NAME: str = "manifest.json"
MODEL_SUFFIX: str = ".dnmd"
CHUNK_SIZE: int = 1 << 16
HTTP_TIMEOUT: float = 60.0
SHA256_REGEX: re.Pattern[str] = re.compile(r"^[0-9a-f]{64}$")


logger: logging.Logger = logging.getLogger(__name__)


class RegistryError(NeuroPipeError):
	"""Implements the base class for registry errors."""


class NotInManifestError(RegistryError, KeyError):
	"""Raised when a model name is not in the manifest."""

	def __init__(self, name: str) -> None:
		"""
		Defines the constructor.

		Args:
			name: The requested model.
		"""
		super().__init__(f"Model {name!r} is not in the registry manifest.")
		self.name: str = name

	def __str__(self) -> str:
		return str(self.args[0])


class NetworkError(RegistryError, OSError):
	"""Raised when a download fails."""


def sha256File(path: PathType) -> str:
	"""
	Computes the sha256 digest of a file.

	Args:
		path: The file.

	Returns:
		The lowercase hex digest.
	"""
	digest = hashlib.sha256()
	with open(path, "rb") as fileObj:
		for chunk in iter(lambda: fileObj.read(CHUNK_SIZE), b""):
			digest.update(chunk)
	return digest.hexdigest()


@dataclass(frozen=True)
class RegistryEntry:
	"""A downloadable model."""

	name: str
	version: str
	url: str
	sha256: str
	byteLength: int
	config: JSONObjectType = field(default_factory=dict)
	"""An echo of the model's configuration, for display."""

	def __post_init__(self) -> None:
		"""
		Performs additional processing after dataclass initialization.

		Raises:
			ConfigError: A field is invalid.
		"""
		if not self.name or "/" in self.name or self.name.startswith("."):
			raise ConfigError("name", f"invalid model name {self.name!r}")
		if SHA256_REGEX.match(self.sha256) is None:
			raise ConfigError("sha256", f"{self.name}: expected 64 lowercase hex digits")
		if self.byteLength < 0:
			raise ConfigError("byte_length", f"{self.name}: must not be negative")

	@property
	def fileName(self) -> str:
		"""The file name of the model in the cache."""
		return f"{self.name}-{self.version}{MODEL_SUFFIX}"

	@classmethod
	def fromDict(cls, name: str, data: JSONMappingType) -> RegistryEntry:  # NOQA: D102
		try:
			return cls(
				name=name,
				version=str(data["version"]),
				url=str(data["url"]),
				sha256=str(data["sha256"]),
				byteLength=int(data["byte_length"]),
				config=dict(data.get("config", {})),
			)
		except KeyError as e:
			raise ConfigError(str(e.args[0]), f"{name}: missing from the manifest entry") from None
		except (TypeError, ValueError) as e:
			raise ConfigError(name, f"malformed manifest entry: {e}") from None

	def toDict(self) -> JSONObjectType:  # NOQA: D102
		return {
			"version": self.version,
			"url": self.url,
			"sha256": self.sha256,
			"byte_length": self.byteLength,
			"config": self.config,
		}


@dataclass(frozen=True)
class RegistryManifest:
	"""The models known to a registry, by name."""

	entries: dict[str, RegistryEntry] = field(default_factory=dict)

	def __contains__(self, name: object) -> bool:
		return name in self.entries

	def __getitem__(self, name: str) -> RegistryEntry:
		try:
			return self.entries[name]
		except KeyError:
			raise NotInManifestError(name) from None

	@classmethod
	def fromDict(cls, data: JSONMappingType) -> RegistryManifest:
		"""
		Parses a manifest.

		Args:
			data: A mapping with an `entries` mapping of name to entry.

		Returns:
			The manifest.

		Raises:
			ConfigError: The manifest is malformed.
		"""
		entries: Any = data.get("entries", {})
		if not isinstance(entries, Mapping):
			raise ConfigError("entries", "must be an object")
		return cls({name: RegistryEntry.fromDict(name, entry) for name, entry in entries.items()})

	@classmethod
	def fromJson(cls, text: str) -> RegistryManifest:  # NOQA: D102
		try:
			data: Any = json.loads(text)
		except json.JSONDecodeError as e:
			raise ConfigError("manifest", f"invalid JSON: {e}") from None
		if not isinstance(data, Mapping):
			raise ConfigError("manifest", "must be an object")
		return cls.fromDict(data)

	def toDict(self) -> JSONObjectType:  # NOQA: D102
		return {"entries": {name: entry.toDict() for name, entry in sorted(self.entries.items())}}

	def withEntry(self, entry: RegistryEntry) -> RegistryManifest:
		"""Returns a manifest with an entry added or replaced."""
		return RegistryManifest({**self.entries, entry.name: entry})

	def write(self, path: PathType) -> None:
		"""Writes the manifest atomically."""
		_atomicWrite(Path(path), (json.dumps(self.toDict(), indent="\t") + "\n").encode("utf-8"))


def _atomicWrite(destination: Path, data: bytes) -> None:
	destination.parent.mkdir(parents=True, exist_ok=True)
	fd, temporary = tempfile.mkstemp(prefix=f".{destination.name}.", dir=destination.parent)
	try:
		with os.fdopen(fd, "wb") as fileObj:
			fileObj.write(data)
		os.replace(temporary, destination)
	except BaseException:
		Path(temporary).unlink(missing_ok=True)
		raise


def defaultCacheRoot() -> Path:
	"""Returns the cache root from the environment, or the default."""
	return Path(os.environ.get(CACHE_VARIABLE) or DEFAULT_CACHE).expanduser()


def packagedManifest() -> RegistryManifest:
	"""Loads the manifest shipped with the package."""
	packaged = resources.files("neuropipe").joinpath("data").joinpath("registry.json")
	return RegistryManifest.fromJson(packaged.read_text(encoding="utf-8"))


def resolveManifest(cacheRoot: Path) -> RegistryManifest:
	"""
	Finds the manifest in effect.

	The environment override comes first, then the manifest in the cache root, then the packaged one.

	Args:
		cacheRoot: The cache root.

	Returns:
		The manifest.
	"""
	candidates: list[Path] = []
	if os.environ.get(MANIFEST_VARIABLE):
		candidates.append(Path(os.environ[MANIFEST_VARIABLE]).expanduser())
	candidates.append(cacheRoot / MANIFEST_NAME)
	for candidate in candidates:
		if candidate.is_file():
			logger.debug(f"Using registry manifest {candidate}.")
			return RegistryManifest.fromJson(candidate.read_text(encoding="utf-8"))
	logger.debug("Using the packaged registry manifest.")
	return packagedManifest()


class Transport(Protocol):
	"""Copies the resource at a URL into a binary stream."""

	def download(self, url: str, stream: BinaryIO) -> None: ...  # NOQA: D102


class HttpTransport:
	"""Downloads over HTTP and HTTPS."""

	def __init__(self, *, timeout: float = HTTP_TIMEOUT, session: Optional[requests.Session] = None) -> None:
		"""
		Defines the constructor.

		Args:
			timeout: The connect and read timeout in seconds.
			session: The session to use, or None for a new one.
		"""
		self.timeout: float = timeout
		self.session: requests.Session = session if session is not None else requests.Session()

	def download(self, url: str, stream: BinaryIO) -> None:  # NOQA: D102
		try:
			with self.session.get(url, stream=True, timeout=self.timeout) as response:
				response.raise_for_status()
				for chunk in response.iter_content(chunk_size=CHUNK_SIZE):
					if chunk:
						stream.write(chunk)
		except requests.RequestException as e:
			raise NetworkError(f"Download of {url} failed: {e}") from e


class FileTransport:
	"""Copies from file URLs."""

	def download(self, url: str, stream: BinaryIO) -> None:  # NOQA: D102
		path: str = urllib.request.url2pathname(urllib.parse.urlparse(url).path)
		try:
			with open(path, "rb") as source:
				shutil.copyfileobj(source, stream, CHUNK_SIZE)
		except OSError as e:
			raise NetworkError(f"Copy of {url} failed: {e}") from e


class SchemeTransport:
	"""Dispatches on the URL scheme."""

	def __init__(self) -> None:
		"""Defines the constructor."""
		self.transports: dict[str, Transport] = {}
		self._lock: threading.Lock = threading.Lock()

	def _transport(self, scheme: str) -> Transport:
		with self._lock:
			if scheme not in self.transports:
				if scheme in ("http", "https"):
					self.transports[scheme] = HttpTransport()
				elif scheme == "file":
					self.transports[scheme] = FileTransport()
				else:
					raise NetworkError(f"Unsupported URL scheme {scheme!r}.")
			return self.transports[scheme]

	def download(self, url: str, stream: BinaryIO) -> None:  # NOQA: D102
		self._transport(urllib.parse.urlparse(url).scheme).download(url, stream)


class ModelRegistry:
	"""A download cache of the models named by a manifest."""

	def __init__(
		self,
		cacheRoot: Optional[PathType] = None,
		manifest: Optional[RegistryManifest] = None,
		*,
		transport: Optional[Transport] = None,
	) -> None:
		"""
		Defines the constructor.

		Args:
			cacheRoot: The cache directory, or None for the environment default.
			manifest: The manifest, or None to resolve it from the environment and cache.
			transport: Performs downloads, or None to dispatch on the URL scheme.
		"""
		self.cacheRoot: Path = Path(cacheRoot).expanduser() if cacheRoot is not None else defaultCacheRoot()
		self._manifest: Optional[RegistryManifest] = manifest
		self.transport: Transport = transport if transport is not None else SchemeTransport()
		self._locksLock: threading.Lock = threading.Lock()
		self._locks: dict[str, threading.Lock] = {}

	@property
	def manifest(self) -> RegistryManifest:
		"""The manifest, resolved on first use."""
		if self._manifest is None:
			self._manifest = resolveManifest(self.cacheRoot)
		return self._manifest

	@property
	def modelsDirectory(self) -> Path:
		"""Where verified models are kept."""
		return self.cacheRoot / "models"

	@property
	def quarantineDirectory(self) -> Path:
		"""Where downloads failing verification are moved."""
		return self.cacheRoot / "quarantine"

	def _lock(self, name: str) -> threading.Lock:
		with self._locksLock:
			return self._locks.setdefault(name, threading.Lock())

	def path(self, name: str) -> Path:
		"""
		Determines the cache path of a model.

		Args:
			name: The model name.

		Returns:
			The path, whether or not the model is cached.

		Raises:
			NotInManifestError: The name is unknown.
		"""
		return self.modelsDirectory / self.manifest[name].fileName

	def isCached(self, name: str) -> bool:
		"""Determines whether a verified copy of a model is in the cache."""
		return name in self.manifest and self.path(name).is_file()

	def fetch(self, name: str) -> Path:
		"""
		Provides a local, verified copy of a model, downloading it if needed.

		Concurrent fetches of the same model download it once.

		Args:
			name: The model name.

		Returns:
			The path of the model file.

		Raises:
			NotInManifestError: The name is unknown.
			ChecksumMismatchError: The download does not hash to the manifest digest.
				The download is quarantined and the cache left unchanged.
			NetworkError: The download failed.
		"""
		entry: RegistryEntry = self.manifest[name]
		destination: Path = self.modelsDirectory / entry.fileName
		with self._lock(name):
			if destination.is_file():
				if sha256File(destination) == entry.sha256:
					logger.debug(f"Cache hit for model {name!r} at {destination}.")
					return destination
				logger.warning(f"Cached model {name!r} fails verification; downloading it again.")
				self._quarantine(destination, entry)
			return self._download(entry, destination)

	def _download(self, entry: RegistryEntry, destination: Path) -> Path:
		destination.parent.mkdir(parents=True, exist_ok=True)
		partial: Path = destination.with_name(destination.name + ".part")
		logger.info(f"Downloading model {entry.name!r} from {entry.url}.")
		try:
			with open(partial, "wb") as stream:
				self.transport.download(entry.url, stream)
		except BaseException:
			partial.unlink(missing_ok=True)
			raise
		digest: str = sha256File(partial)
		if digest != entry.sha256:
			self._quarantine(partial, entry)
			raise ChecksumMismatchError(entry.name, entry.sha256, digest)
		size: int = partial.stat().st_size
		if entry.byteLength and size != entry.byteLength:
			logger.warning(f"Model {entry.name!r} has {size} bytes, the manifest lists {entry.byteLength}.")
		os.replace(partial, destination)
		logger.info(f"Cached model {entry.name!r} at {destination}.")
		return destination

	def _quarantine(self, path: Path, entry: RegistryEntry) -> None:
		self.quarantineDirectory.mkdir(parents=True, exist_ok=True)
		target: Path = self.quarantineDirectory / f"{entry.fileName}.{sha256File(path)[:12]}"
		os.replace(path, target)
		logger.warning(f"Quarantined model file for {entry.name!r} at {target}.")

	def delete(self, name: str) -> None:
		"""
		Removes a model from the cache. Unknown or uncached models are ignored.

		Args:
			name: The model name.
		"""
		if name not in self.manifest:
			logger.debug(f"Nothing to delete for unknown model {name!r}.")
			return
		with self._lock(name):
			path: Path = self.path(name)
			if path.is_file():
				path.unlink()
				logger.info(f"Deleted cached model {name!r}.")

	def listEntries(self) -> list[tuple[RegistryEntry, bool]]:
		"""Lists every manifest entry with whether it is cached."""
		return [(entry, self.isCached(name)) for name, entry in sorted(self.manifest.entries.items())]

	def registerLocal(
		self, name: str, path: PathType, *, version: str = "local", config: Optional[JSONMappingType] = None
	) -> RegistryEntry:
		"""
		Adds a local model file to the cache manifest, keyed by a file URL.

		Args:
			name: The model name.
			path: The model file.
			version: The version label.
			config: An echo of the model configuration.

		Returns:
			The new entry.
		"""
		source: Path = Path(path).resolve()
		entry = RegistryEntry(
			name=name,
			version=version,
			url=source.as_uri(),
			sha256=sha256File(source),
			byteLength=source.stat().st_size,
			config=dict(config or {}),
		)
		manifestPath: Path = self.cacheRoot / MANIFEST_NAME
		current: RegistryManifest = (
			RegistryManifest.fromJson(manifestPath.read_text(encoding="utf-8"))
			if manifestPath.is_file()
			else self.manifest
		)
		self._manifest = current.withEntry(entry)
		self._manifest.write(manifestPath)
		logger.info(f"Registered model {name!r} from {source}.")
		return entry
