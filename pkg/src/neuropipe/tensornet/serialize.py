"""
Model files (DNMD).

A model file is a checksummed container whose manifest holds the layer graph, the configuration
echo, the metadata, blob references for every parameter and moving statistic and, for training
checkpoints, the optimizer state and the training progress.
"""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, Optional

# Local Modules:
from ..container import ContainerReader, ContainerWriter
from ..errors import ContainerError, NeuroPipeError
from ..typedef import JSONMappingType, JSONObjectType, PathType
from .model import Model
from .optim import Optimizer
from .tensor import ArrayType


MODEL_MAGIC: bytes = b"DNMD"
MODEL_VERSION: int = 1
SUPPORTED_MODEL_VERSIONS: frozenset[int] = frozenset((MODEL_VERSION,))


logger: logging.Logger = logging.getLogger(__name__)


class ModelIOError(NeuroPipeError, OSError):
	"""Raised when a model file cannot be read or written."""


@dataclass
class ModelFile:
	"""The decoded content of a model file."""

	model: Model
	optimizerScalars: Optional[JSONObjectType] = None
	optimizerArrays: dict[str, ArrayType] = field(default_factory=dict)
	training: Optional[JSONObjectType] = None


def _blobs(writer: ContainerWriter, arrays: Mapping[str, ArrayType]) -> JSONObjectType:
	return {name: writer.addBlob(array) for name, array in arrays.items()}


def modelContainer(
	model: Model,
	*,
	optimizer: Optional[Optimizer] = None,
	training: Optional[JSONMappingType] = None,
) -> tuple[ContainerWriter, JSONObjectType]:
	"""
	Lays out a model file.

	Args:
		model: The model. Must be initialized.
		optimizer: The optimizer whose state to include, for checkpoints.
		training: The training progress to include, for checkpoints.

	Returns:
		The container writer holding the blobs and the manifest.
	"""
	if not model.isInitialized:
		raise NeuroPipeError("Cannot save a model without parameters.")
	writer = ContainerWriter(MODEL_MAGIC, MODEL_VERSION)
	manifest: JSONObjectType = {
		"version": MODEL_VERSION,
		"graph": model.graphSpec(),
		"config": model.config,
		"metadata": model.metadata,
		"parameters": _blobs(writer, model.parameterArrays()),
		"state": _blobs(writer, model.state),
		"optimizer": None,
		"training": dict(training) if training is not None else None,
	}
	if optimizer is not None:
		manifest["optimizer"] = {
			"scalars": optimizer.stateScalars(),
			"arrays": _blobs(writer, optimizer.stateArrays()),
		}
	return writer, manifest


def saveModel(
	model: Model,
	path: PathType,
	*,
	optimizer: Optional[Optimizer] = None,
	training: Optional[JSONMappingType] = None,
) -> None:
	"""
	Writes a model file atomically.

	Args:
		model: The model. Must be initialized.
		path: The destination path.
		optimizer: The optimizer whose state to include, for checkpoints.
		training: The training progress to include, for checkpoints.

	Raises:
		ModelIOError: The file could not be written.
	"""
	writer, manifest = modelContainer(model, optimizer=optimizer, training=training)
	try:
		writer.write(path, manifest)
	except OSError as e:
		raise ModelIOError(f"Unable to write {path}: {e}") from e
	logger.debug(f"Saved model with {len(model.parameters)} parameter tensors to {path}.")


def modelFromReader(reader: ContainerReader) -> ModelFile:
	"""
	Decodes an opened model container.

	Every blob is verified before the model is assembled.

	Args:
		reader: The container.

	Returns:
		The model file content.

	Raises:
		ContainerError: The manifest is malformed.
		ChecksumMismatchError: A blob does not match its checksum.
	"""
	manifest: JSONObjectType = reader.manifest
	try:
		parameters: dict[str, ArrayType] = {
			name: reader.blob(reference, name) for name, reference in dict(manifest["parameters"]).items()
		}
		state: dict[str, ArrayType] = {
			name: reader.blob(reference, name) for name, reference in dict(manifest["state"]).items()
		}
		optimizer: Optional[Mapping[str, Any]] = manifest.get("optimizer")
		optimizerArrays: dict[str, ArrayType] = {}
		optimizerScalars: Optional[JSONObjectType] = None
		if optimizer is not None:
			optimizerScalars = dict(optimizer["scalars"])
			optimizerArrays = {
				name: reader.blob(reference, f"optimizer:{name}")
				for name, reference in dict(optimizer["arrays"]).items()
			}
		model: Model = Model.fromGraphSpec(
			manifest["graph"], manifest.get("config") or {}, metadata=manifest.get("metadata") or {}
		)
		model.setParameters(parameters, state)
		if not model.isInitialized:
			missing: list[str] = sorted(set(model.parameterShapes) - set(model.parameters))
			raise ContainerError(f"Model file lacks parameters {missing}.")
		training: Optional[Mapping[str, Any]] = manifest.get("training")
	except (KeyError, TypeError, ValueError, AttributeError) as e:
		raise ContainerError(f"Malformed model manifest: {e}") from e
	trainingState: Optional[JSONObjectType] = dict(training) if training is not None else None
	return ModelFile(model, optimizerScalars, optimizerArrays, trainingState)


def readModelFile(path: PathType) -> ModelFile:
	"""
	Reads a model file, including any checkpoint content.

	Args:
		path: The file path.

	Returns:
		The model file content.

	Raises:
		ModelIOError: The file could not be read.
		BadMagicError: The file is not a model file.
		VersionUnsupportedError: The version is not supported.
		TruncatedFileError: The file is truncated.
		ChecksumMismatchError: A blob does not match its checksum.
	"""
	try:
		reader: ContainerReader = ContainerReader.fromFile(path, MODEL_MAGIC, SUPPORTED_MODEL_VERSIONS)
	except OSError as e:
		raise ModelIOError(f"Unable to read {path}: {e}") from e
	return modelFromReader(reader)


def loadModel(path: PathType) -> Model:
	"""
	Reads a model file.

	Args:
		path: The file path.

	Returns:
		The model.
	"""
	model: Model = readModelFile(path).model
	logger.debug(f"Loaded {model!r} from {path}.")
	return model
