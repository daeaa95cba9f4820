"""Exceptions shared across modules."""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
from typing import Any


class NeuroPipeError(Exception):
	"""Implements the base class for all NeuroPipe exceptions."""


class InvariantViolationError(NeuroPipeError, ValueError):
	"""Raised when a value object is constructed in an invalid state."""


class ConfigError(NeuroPipeError, ValueError):
	"""Raised when a configuration document is invalid."""

	def __init__(self, field: str, message: str) -> None:
		"""
		Defines the constructor.

		Args:
			field: The name of the offending configuration field.
			message: A description of the problem.
		"""
		super().__init__(f"{field}: {message}")
		self.field: str = field


class ShapeMismatchError(NeuroPipeError, ValueError):
	"""Raised when tensor or volume shapes disagree."""

	def __init__(self, message: str, *, expected: Any = None, got: Any = None) -> None:
		"""
		Defines the constructor.

		Args:
			message: A description of the mismatch.
			expected: The expected shape, if known.
			got: The actual shape, if known.
		"""
		if expected is not None or got is not None:
			message = f"{message} (expected {expected}, got {got})"
		super().__init__(message)
		self.expected: Any = expected
		self.got: Any = got


class ContainerError(NeuroPipeError):
	"""Implements the base class for binary container format exceptions."""


class BadMagicError(ContainerError):
	"""Raised when a file does not start with the expected magic bytes."""


class VersionUnsupportedError(ContainerError):
	"""Raised when a container declares a version this reader does not understand."""


class TruncatedFileError(ContainerError):
	"""Raised when a container ends before its declared content."""


class ChecksumMismatchError(NeuroPipeError):
	"""Raised when stored data does not hash to its recorded checksum."""

	def __init__(self, name: str, expected: str, got: str) -> None:
		"""
		Defines the constructor.

		Args:
			name: The name of the blob or file that failed verification.
			expected: The recorded checksum.
			got: The computed checksum.
		"""
		super().__init__(f"Checksum mismatch for {name!r}: expected {expected}, got {got}.")
		self.name: str = name
		self.expected: str = expected
		self.got: str = got
