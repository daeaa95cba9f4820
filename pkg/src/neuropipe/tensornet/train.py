"""
Deterministic mini-batch training.

Given a seed, the sample order of epoch `e` is a permutation drawn from `SeedSequence([seed, e])`
and the dropout masks of step `s` come from `SeedSequence([seed, DROPOUT_STREAM, s])`. Together
with the optimizer moments and moving statistics stored in checkpoints, a run resumed from any
checkpoint produces the same parameters as an uninterrupted run.
"""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import json
import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, TextIO, Union

# Third-party Modules:
import numpy as np

# Local Modules:
from ..augment import SampleStream
from ..collection import INPUT_GROUP, LABEL_GROUP, DataCollection
from ..errors import ConfigError, NeuroPipeError, ShapeMismatchError
from ..typedef import IntArray, JSONMappingType, JSONObjectType, TrainingCallbackType
from .losses import lossFunction
from .model import Model
from .optim import Optimizer, optimizerFromName
from .serialize import readModelFile, saveModel
from .tensor import ArrayType, Tensor


DROPOUT_STREAM: int = 0x44524F50
BEST_SUFFIX: str = ".best"


logger: logging.Logger = logging.getLogger(__name__)


class NonFiniteLossError(NeuroPipeError):
	"""Raised when a training step produces a NaN or infinite loss."""

	def __init__(self, step: int, loss: float) -> None:
		"""
		Defines the constructor.

		Args:
			step: The 0-based index of the failing step.
			loss: The loss value.
		"""
		super().__init__(f"Loss became {loss} at step {step}; the last checkpoint is kept.")
		self.step: int = step
		self.loss: float = loss


@dataclass(frozen=True)
class TrainingConfig:
	"""Training loop parameters; JSON documents use snake_case keys."""

	batchSize: int = 1
	steps: Optional[int] = None
	"""The number of optimizer steps. Exclusive with epochs."""
	epochs: Optional[int] = None
	"""The number of passes over the samples. Defaults to 1 when steps is not given."""
	seed: int = 0
	learningRate: Optional[float] = None
	"""Overrides the model's initial learning rate."""
	optimizer: Optional[str] = None
	"""Overrides the model's optimizer."""
	checkpointPath: Optional[str] = None
	historyPath: Optional[str] = None
	inputGroup: str = INPUT_GROUP
	targetGroup: str = LABEL_GROUP

	def __post_init__(self) -> None:
		"""
		Performs additional processing after dataclass initialization.

		Raises:
			ConfigError: A field is invalid.
		"""
		if self.batchSize < 1:
			raise ConfigError("batch_size", f"expected at least 1, got {self.batchSize}")
		if self.steps is not None and self.epochs is not None:
			raise ConfigError("steps", "steps and epochs are mutually exclusive")
		if self.steps is not None and self.steps < 0:
			raise ConfigError("steps", f"must not be negative, got {self.steps}")
		if self.epochs is not None and self.epochs < 0:
			raise ConfigError("epochs", f"must not be negative, got {self.epochs}")
		if self.learningRate is not None and self.learningRate < 0:
			raise ConfigError("learning_rate", "must not be negative")

	@property
	def bestPath(self) -> Optional[str]:
		"""Where the checkpoint with the lowest epoch loss goes."""
		return None if self.checkpointPath is None else self.checkpointPath + BEST_SUFFIX

	@classmethod
	def fromDict(cls, data: JSONMappingType) -> TrainingConfig:
		"""
		Parses a snake_case configuration.

		Args:
			data: The configuration.

		Returns:
			The configuration.

		Raises:
			ConfigError: A key is unknown or a value is invalid.
		"""
		keys: dict[str, str] = {
			"batch_size": "batchSize",
			"steps": "steps",
			"epochs": "epochs",
			"seed": "seed",
			"learning_rate": "learningRate",
			"optimizer": "optimizer",
			"checkpoint_path": "checkpointPath",
			"history_path": "historyPath",
			"input_group": "inputGroup",
			"target_group": "targetGroup",
		}
		unknown: list[str] = sorted(set(data) - set(keys))
		if unknown:
			raise ConfigError(unknown[0], "unknown training parameter")
		return cls(**{keys[key]: value for key, value in data.items()})


SampleSourceType = Union[SampleStream, DataCollection]
FetchType = Callable[[int], tuple[ArrayType, ArrayType]]


def _sampleSource(samples: SampleSourceType, inputGroup: str, targetGroup: str) -> tuple[int, FetchType]:
	if isinstance(samples, DataCollection):
		caseIds: tuple[str, ...] = samples.caseIds

		def fetchCase(index: int) -> tuple[ArrayType, ArrayType]:
			return (
				samples.caseTensor(caseIds[index], inputGroup),
				samples.caseTensor(caseIds[index], targetGroup),
			)

		return len(samples), fetchCase

	def fetchSample(index: int) -> tuple[ArrayType, ArrayType]:
		volumes = samples[index].volumes
		return volumes[inputGroup].data, volumes[targetGroup].data

	return len(samples), fetchSample


def epochOrder(seed: int, epoch: int, count: int) -> IntArray:
	"""
	Returns the sample order of an epoch.

	Args:
		seed: The training seed.
		epoch: The 0-based epoch.
		count: The number of samples.

	Returns:
		A permutation of the sample indices.
	"""
	return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(count)


class _Progress:
	def __init__(self) -> None:
		self.step: int = 0
		self.bestLoss: float = math.inf
		self.epochLosses: list[float] = []
		self.history: list[JSONObjectType] = []

	def toDict(self) -> JSONObjectType:
		return {
			"step": self.step,
			"best_loss": None if math.isinf(self.bestLoss) else self.bestLoss,
			"epoch_losses": list(self.epochLosses),
			"history": list(self.history),
		}

	def load(self, data: JSONMappingType) -> None:
		self.step = int(data["step"])
		bestLoss: Any = data.get("best_loss")
		self.bestLoss = math.inf if bestLoss is None else float(bestLoss)
		self.epochLosses = [float(value) for value in data.get("epoch_losses", [])]
		self.history = [dict(record) for record in data.get("history", [])]


def _resume(model: Model, optimizer: Optimizer, path: str, progress: _Progress) -> None:
	checkpoint = readModelFile(path)
	if checkpoint.training is None:
		raise NeuroPipeError(f"{path} is a model file, not a training checkpoint.")
	model.setParameters(checkpoint.model.parameterArrays(), checkpoint.model.state)
	optimizer.loadState(checkpoint.optimizerScalars or {}, checkpoint.optimizerArrays)
	progress.load(checkpoint.training)
	logger.info(f"Resumed training from {path} at step {progress.step}.")


def train(  # NOQA: C901
	model: Model,
	samples: SampleSourceType,
	config: TrainingConfig,
	*,
	callbacks: Sequence[TrainingCallbackType] = (),
	resume: bool = False,
) -> list[JSONObjectType]:
	"""
	Trains a model in place.

	A checkpoint is written at the end of every epoch and when training stops; a copy goes to
	`<checkpoint>.best` whenever an epoch's mean loss improves on every earlier epoch.

	Args:
		model: The initialized model.
		samples: An augmented sample stream or a collection, with the input and target groups.
		config: The loop parameters.
		callbacks: Called with every history record.
		resume: Continue from the checkpoint if it exists.

	Returns:
		The history, one `{"step", "loss", "lr", "wall_ms"}` record per step.

	Raises:
		ShapeMismatchError: The samples do not fit the model.
		NonFiniteLossError: A step produced a NaN or infinite loss.
	"""
	count, fetch = _sampleSource(samples, config.inputGroup, config.targetGroup)
	if count == 0:
		raise ShapeMismatchError("There are no samples to train on")
	x, y = fetch(0)
	if x.shape != model.inputShape:
		raise ShapeMismatchError("Samples do not fit the model input", expected=model.inputShape, got=x.shape)
	if y.shape != model.outputShape:
		raise ShapeMismatchError(
			"Targets do not fit the model output", expected=model.outputShape, got=y.shape
		)
	learningRate: float = (
		config.learningRate
		if config.learningRate is not None
		else float(model.config.get("initial_learning_rate", 1e-3))
	)
	optimizer: Optimizer = optimizerFromName(
		config.optimizer or str(model.config.get("optimizer", "adam")), learningRate
	)
	loss = lossFunction(str(model.config.get("cost_function", "soft_dice")))
	stepsPerEpoch: int = math.ceil(count / config.batchSize)
	epochs: int = 1 if config.epochs is None else config.epochs
	totalSteps: int = config.steps if config.steps is not None else epochs * stepsPerEpoch
	progress = _Progress()
	if resume and config.checkpointPath is not None and Path(config.checkpointPath).exists():
		_resume(model, optimizer, config.checkpointPath, progress)
	history: Optional[TextIO] = None
	if config.historyPath is not None:
		Path(config.historyPath).parent.mkdir(parents=True, exist_ok=True)
		history = open(config.historyPath, "a" if resume else "w", encoding="utf-8")

	def checkpoint(path: Optional[str]) -> None:
		if path is not None:
			saveModel(model, path, optimizer=optimizer, training=progress.toDict())

	logger.info(f"Training for {totalSteps} steps, {stepsPerEpoch} per epoch, from step {progress.step}.")
	try:
		while progress.step < totalSteps:
			started: float = time.perf_counter()
			epoch, position = divmod(progress.step, stepsPerEpoch)
			indices: IntArray = epochOrder(config.seed, epoch, count)[
				position * config.batchSize : (position + 1) * config.batchSize
			]
			pairs: list[tuple[ArrayType, ArrayType]] = [fetch(int(index)) for index in indices]
			inputs = Tensor(np.stack([pair[0] for pair in pairs]).astype(model.dtype))
			targets: ArrayType = np.stack([pair[1] for pair in pairs]).astype(model.dtype)
			rng: np.random.Generator = np.random.default_rng(
				np.random.SeedSequence([config.seed, DROPOUT_STREAM, progress.step])
			)
			model.zeroGrad()
			value: Tensor = loss(model.forward(inputs, training=True, rng=rng), targets)
			lossValue: float = float(value.data)
			if not math.isfinite(lossValue):
				raise NonFiniteLossError(progress.step, lossValue)
			value.backward()
			optimizer.step(model.parameters)
			progress.step += 1
			record: JSONObjectType = {
				"step": progress.step,
				"loss": lossValue,
				"lr": learningRate,
				"wall_ms": round((time.perf_counter() - started) * 1000, 3),
			}
			progress.history.append(record)
			progress.epochLosses.append(lossValue)
			if history is not None:
				history.write(json.dumps(record, sort_keys=True) + "\n")
				history.flush()
			for callback in callbacks:
				callback(record)
			logger.debug(f"Step {progress.step}: loss {lossValue:.6f}.")
			if position + 1 == stepsPerEpoch:
				epochLoss: float = float(np.mean(progress.epochLosses))
				progress.epochLosses = []
				logger.info(f"Epoch {epoch + 1} finished with mean loss {epochLoss:.6f}.")
				if epochLoss < progress.bestLoss:
					progress.bestLoss = epochLoss
					checkpoint(config.bestPath)
				checkpoint(config.checkpointPath)
			elif progress.step == totalSteps:
				checkpoint(config.checkpointPath)
	finally:
		if history is not None:
			history.close()
	finalLoss: Optional[float] = progress.history[-1]["loss"] if progress.history else None
	model.metadata["training"] = {"steps": progress.step, "final_loss": finalLoss}
	return progress.history
