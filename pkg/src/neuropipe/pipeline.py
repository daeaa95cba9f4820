"""
Packaged pipelines.

A pipeline is a JSON document naming its input channels, a preprocessing chain, one or more models
with their patch plans, a postprocessing chain and the files to write. Later models may take the
outputs of earlier ones as extra input channels, which is how the tumor segmentation cascade works.
This module also composes training runs from JSON and trains the tiny models the shipped pipelines
use when no clinically trained weights are available.
"""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import json
import logging
import time
from collections.abc import Iterable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

# Local Modules:
from .augment import AugmentationNode, augmentationFromSpec, expand
from .collection import (
	INPUT_GROUP,
	LABEL_GROUP,
	Case,
	DataCollection,
	DataGroup,
	collectionFromCsv,
	collectionFromDirectory,
)
from .errors import ConfigError, NeuroPipeError, ShapeMismatchError
from .infer import PlanParams, inferVolume
from .nifti import writeNifti
from .registry import ModelRegistry
from .synthetic import diskCollection, phantomCollection
from .tensornet.model import Model
from .tensornet.serialize import loadModel, saveModel
from .tensornet.train import TrainingConfig, train
from .tensornet.unet import UNetConfig, buildUnet
from .transforms import TransformChain, chainApplyCollection, chainApplyVolume, postprocessChain
from .typedef import JSONMappingType, JSONObjectType, PathType, ShapeType
from .volume import AffineVolume, stackChannels


PIPELINE_NAMES: tuple[str, ...] = ("skullstrip", "segment_gbm")


logger: logging.Logger = logging.getLogger(__name__)


class PipelineError(NeuroPipeError):
	"""Implements the base class for pipeline errors."""


class StageError(PipelineError):
	"""Raised when a stage of a case fails."""

	def __init__(self, caseId: str, stage: str, cause: BaseException) -> None:
		"""
		Defines the constructor.

		Args:
			caseId: The case being processed.
			stage: The stage that failed, such as 'preprocess' or 'model skullstrip'.
			cause: The underlying error.
		"""
		super().__init__(f"Case {caseId!r}, {stage}: {cause}")
		self.caseId: str = caseId
		self.stage: str = stage
		self.cause: BaseException = cause


@dataclass(frozen=True)
class InputBinding:
	"""A pipeline input channel and the command line flag that supplies it."""

	channel: str
	flag: str
	help: str = ""

	@classmethod
	def fromDict(cls, data: JSONMappingType) -> InputBinding:  # NOQA: D102
		if "channel" not in data:
			raise ConfigError("inputs.channel", "is required")
		channel: str = str(data["channel"])
		return cls(channel, str(data.get("flag", channel)), str(data.get("help", "")))

	def toDict(self) -> JSONObjectType:  # NOQA: D102
		return {"channel": self.channel, "flag": self.flag, "help": self.help}


@dataclass(frozen=True)
class ModelStage:
	"""One model of a pipeline."""

	name: str
	"""The stage name, which is also the name of its output."""
	source: str
	"""The registry name of the model."""
	plan: PlanParams = field(default_factory=PlanParams)
	feed: tuple[str, ...] = ()
	"""Outputs of earlier stages appended to the input channels, in order."""
	unet: Optional[UNetConfig] = None
	"""The architecture the stage was designed with, checked against the declared channels."""

	@classmethod
	def fromDict(cls, data: JSONMappingType) -> ModelStage:
		"""
		Parses a stage.

		Args:
			data: A mapping with name, and optional source, plan, feed, and unet keys.

		Returns:
			The stage.

		Raises:
			ConfigError: The stage is invalid.
		"""
		unknown: set[str] = set(data) - {"name", "source", "plan", "feed", "unet"}
		if unknown:
			raise ConfigError(f"models.{sorted(unknown)[0]}", "unknown stage field")
		if not data.get("name"):
			raise ConfigError("models.name", "is required")
		name: str = str(data["name"])
		unet: Optional[UNetConfig] = None
		if data.get("unet") is not None:
			try:
				unet = UNetConfig.fromDict(data["unet"])
			except ConfigError as e:
				raise ConfigError(f"models.{name}.unet.{e.field}", str(e).partition(": ")[2]) from e
		return cls(
			name=name,
			source=str(data.get("source", name)),
			plan=PlanParams.fromDict(data.get("plan") or {}),
			feed=tuple(str(item) for item in data.get("feed") or ()),
			unet=unet,
		)

	def toDict(self) -> JSONObjectType:  # NOQA: D102
		result: JSONObjectType = {
			"name": self.name,
			"source": self.source,
			"plan": self.plan.toDict(),
			"feed": list(self.feed),
		}
		if self.unet is not None:
			result["unet"] = self.unet.toDict()
		return result


def _checkTemplate(name: str, template: str) -> None:
	try:
		fileName: str = template.format(case="case")
	except (AttributeError, IndexError, KeyError, ValueError) as e:
		raise ConfigError(f"outputs.{name}", f"{template!r} may only substitute {{case}} ({e!r})") from None
	if Path(fileName).name in ("", ".", ".."):
		raise ConfigError(f"outputs.{name}", f"{template!r} does not name a file")


def _checkCaseId(caseId: str) -> None:
	if not caseId or caseId in (".", "..") or "/" in caseId or "\\" in caseId:
		raise ConfigError("case", f"{caseId!r} cannot name an output directory")


@dataclass(frozen=True)
class PipelineConfig:
	"""A packaged pipeline."""

	name: str
	inputs: tuple[InputBinding, ...]
	models: tuple[ModelStage, ...]
	preprocess: TransformChain = field(default_factory=TransformChain)
	postprocess: TransformChain = field(default_factory=lambda: postprocessChain(()))
	outputs: Mapping[str, str] = field(default_factory=dict)
	"""Output file name templates by stage name; `{case}` expands to the case id."""
	description: str = ""

	def __post_init__(self) -> None:
		"""
		Performs additional processing after dataclass initialization.

		Raises:
			ConfigError: Channels, feeds, or outputs are inconsistent, or an output template substitutes
				anything but `{case}`.
		"""
		object.__setattr__(self, "inputs", tuple(self.inputs))
		object.__setattr__(self, "models", tuple(self.models))
		object.__setattr__(self, "outputs", dict(self.outputs))
		if not self.inputs:
			raise ConfigError("inputs", "a pipeline needs at least one input channel")
		if not self.models:
			raise ConfigError("models", "a pipeline needs at least one model")
		channels: list[str] = [binding.channel for binding in self.inputs]
		if len(set(channels)) != len(channels):
			raise ConfigError("inputs", "channel names must be unique")
		flags: list[str] = [binding.flag for binding in self.inputs]
		if len(set(flags)) != len(flags):
			raise ConfigError("inputs", "flags must be unique")
		earlier: list[str] = []
		for stage in self.models:
			if stage.name in earlier:
				raise ConfigError(f"models.{stage.name}", "stage names must be unique")
			for name in stage.feed:
				if name not in earlier:
					raise ConfigError(f"models.{stage.name}.feed", f"{name!r} is not an earlier stage")
			if stage.unet is not None and stage.unet.inputChannels != self.stageChannels(stage):
				raise ConfigError(
					f"models.{stage.name}.unet.input_shape",
					f"takes {stage.unet.inputChannels} channels, the pipeline supplies "
					+ f"{len(self.inputs)} inputs and {len(stage.feed)} fed outputs",
				)
			earlier.append(stage.name)
		for name, template in self.outputs.items():
			if name not in earlier:
				raise ConfigError(f"outputs.{name}", "is not a stage")
			_checkTemplate(name, template)

	def stageChannels(self, stage: ModelStage) -> int:
		"""The number of input channels a stage receives."""
		return len(self.inputs) + len(stage.feed)

	def stage(self, name: str) -> ModelStage:
		"""Looks up a stage by name."""
		for stage in self.models:
			if stage.name == name:
				return stage
		raise ConfigError("models", f"no stage named {name!r}")

	@classmethod
	def fromDict(cls, data: JSONMappingType) -> PipelineConfig:
		"""
		Parses a pipeline.

		Args:
			data: The pipeline JSON object.

		Returns:
			The pipeline.

		Raises:
			ConfigError: The pipeline is invalid.
		"""
		known: set[str] = {"name", "description", "inputs", "preprocess", "models", "postprocess", "outputs"}
		unknown: set[str] = set(data) - known
		if unknown:
			raise ConfigError(sorted(unknown)[0], "unknown pipeline field")
		try:
			preprocess: TransformChain = TransformChain.fromSpec(data.get("preprocess") or ())
		except ConfigError as e:
			raise ConfigError(f"preprocess{e.field}", str(e).partition(": ")[2]) from e
		try:
			postprocess: TransformChain = postprocessChain(data.get("postprocess") or ())
		except ConfigError as e:
			raise ConfigError(f"postprocess{e.field}", str(e).partition(": ")[2]) from e
		return cls(
			name=str(data.get("name", "")),
			description=str(data.get("description", "")),
			inputs=tuple(InputBinding.fromDict(item) for item in data.get("inputs") or ()),
			models=tuple(ModelStage.fromDict(item) for item in data.get("models") or ()),
			preprocess=preprocess,
			postprocess=postprocess,
			outputs={str(key): str(value) for key, value in (data.get("outputs") or {}).items()},
		)

	@classmethod
	def fromJson(cls, text: str) -> PipelineConfig:  # NOQA: D102
		try:
			data: Any = json.loads(text)
		except json.JSONDecodeError as e:
			raise ConfigError("pipeline", f"invalid JSON: {e}") from None
		if not isinstance(data, Mapping):
			raise ConfigError("pipeline", "must be an object")
		return cls.fromDict(data)

	def toDict(self) -> JSONObjectType:  # NOQA: D102
		return {
			"name": self.name,
			"description": self.description,
			"inputs": [binding.toDict() for binding in self.inputs],
			"preprocess": self.preprocess.toSpec(),
			"models": [stage.toDict() for stage in self.models],
			"postprocess": self.postprocess.toSpec(),
			"outputs": dict(self.outputs),
		}


def loadPipeline(name: str) -> PipelineConfig:
	"""
	Loads a pipeline shipped with the package.

	Args:
		name: skullstrip or segment_gbm.

	Returns:
		The pipeline.
	"""
	if name not in PIPELINE_NAMES:
		raise ConfigError("pipeline", f"unknown pipeline {name!r}; expected one of {list(PIPELINE_NAMES)}")
	packaged = resources.files("neuropipe").joinpath("data").joinpath("pipelines").joinpath(f"{name}.json")
	return PipelineConfig.fromJson(packaged.read_text(encoding="utf-8"))


def loadPipelineFile(path: PathType) -> PipelineConfig:
	"""Loads a pipeline from a JSON file."""
	return PipelineConfig.fromJson(Path(path).read_text(encoding="utf-8"))


def requireInputChannels(config: PipelineConfig, stage: ModelStage, model: Model) -> None:
	"""
	Checks that a model takes exactly the channels its stage receives.

	Args:
		config: The pipeline.
		stage: The stage.
		model: The model bound to the stage.

	Raises:
		ShapeMismatchError: The channel counts differ.
	"""
	expected: int = config.stageChannels(stage)
	got: int = model.inputShape[-1]
	if got != expected:
		raise ShapeMismatchError(
			f"Model for stage {stage.name!r} takes {got} channels; the pipeline supplies "
			+ f"{len(config.inputs)} inputs and {len(stage.feed)} fed outputs",
			expected=expected,
			got=got,
		)


def bindModels(
	config: PipelineConfig,
	*,
	registry: Optional[ModelRegistry] = None,
	modelPaths: Optional[Mapping[str, PathType]] = None,
) -> dict[str, Model]:
	"""
	Loads the model of every stage.

	Args:
		config: The pipeline.
		registry: Resolves stage sources, or None for the default registry.
		modelPaths: Model files by stage name, bypassing the registry.

	Returns:
		The models by stage name.

	Raises:
		ConfigError: A model path names an unknown stage.
		ShapeMismatchError: A model does not take the channels its stage receives.
	"""
	overrides: dict[str, PathType] = dict(modelPaths or {})
	for name in overrides:
		config.stage(name)
	models: dict[str, Model] = {}
	for stage in config.models:
		if stage.name in overrides:
			path: PathType = overrides[stage.name]
		else:
			if registry is None:
				registry = ModelRegistry()
			path = registry.fetch(stage.source)
		model: Model = loadModel(path)
		requireInputChannels(config, stage, model)
		models[stage.name] = model
		logger.info(f"Bound stage {stage.name!r} to {path} (input {model.inputShape}).")
	return models


def inputCollection(
	config: PipelineConfig, channels: Mapping[str, Mapping[str, PathType]]
) -> DataCollection:
	"""
	Builds the collection a pipeline reads.

	Args:
		config: The pipeline.
		channels: Input file paths by case id, then channel.

	Returns:
		A collection with one input_data group holding the pipeline's channels in order.

	Raises:
		ConfigError: A case lacks a channel or names an unknown one, or its id cannot name a directory.
	"""
	labels: tuple[str, ...] = tuple(binding.channel for binding in config.inputs)
	volumes: dict[str, dict[str, tuple[Path, ...]]] = {}
	for caseId, paths in channels.items():
		_checkCaseId(caseId)
		unknown: set[str] = set(paths) - set(labels)
		if unknown:
			raise ConfigError(sorted(unknown)[0], f"not an input channel of {config.name}")
		missing: list[str] = [label for label in labels if label not in paths]
		if missing:
			raise ConfigError(missing[0], f"case {caseId!r} has no file for this channel")
		volumes[caseId] = {INPUT_GROUP: tuple(Path(paths[label]).resolve() for label in labels)}
	return DataCollection(
		[DataGroup(INPUT_GROUP, labels)], [Case(caseId, sources) for caseId, sources in volumes.items()]
	)


def casesFromCsv(config: PipelineConfig, path: PathType) -> DataCollection:
	"""
	Reads a batch of cases from a CSV file.

	The header is `case,input_data:<channel>,...` with one column per pipeline input.

	Args:
		config: The pipeline.
		path: The CSV file.

	Returns:
		A collection with the pipeline's channels in order.

	Raises:
		ConfigError: The columns do not match the pipeline inputs.
	"""
	collection: DataCollection = collectionFromCsv(path)
	labels: tuple[str, ...] = tuple(binding.channel for binding in config.inputs)
	group: DataGroup = collection.group(INPUT_GROUP)
	if set(group.channelLabels) != set(labels) or len(group.channelLabels) != len(labels):
		raise ConfigError(
			"cases", f"CSV columns {list(group.channelLabels)} differ from inputs {list(labels)}"
		)
	channels: dict[str, dict[str, PathType]] = {}
	for caseId in collection.caseIds:
		sources = collection.case(caseId).sources[INPUT_GROUP]
		channels[caseId] = {
			label: source for label, source in zip(group.channelLabels, sources) if isinstance(source, Path)
		}
	return inputCollection(config, channels)


@dataclass
class PipelineResult:
	"""The files written per case and the cases that failed."""

	outputs: dict[str, dict[str, Path]] = field(default_factory=dict)
	failures: dict[str, str] = field(default_factory=dict)

	@property
	def exitCode(self) -> int:
		"""0 if every case succeeded, 1 otherwise."""
		return 1 if self.failures else 0


def processCase(
	config: PipelineConfig,
	models: Mapping[str, Model],
	collection: DataCollection,
	caseId: str,
	*,
	preprocess: Optional[TransformChain] = None,
	overlap: Optional[float] = None,
	threads: int = 1,
) -> dict[str, AffineVolume]:
	"""
	Runs every stage of a pipeline on one case.

	Args:
		config: The pipeline.
		models: The bound models by stage name.
		collection: The input collection.
		caseId: The case.
		preprocess: The preprocessing chain, defaulting to the pipeline's.
		overlap: Overrides the overlap of every stage plan.
		threads: The number of patch batches evaluated concurrently.

	Returns:
		The post-processed output of every stage, by stage name.

	Raises:
		StageError: A stage failed; the error names the case and the stage.
	"""
	chain: TransformChain = config.preprocess if preprocess is None else preprocess
	started: float = time.perf_counter()
	try:
		volume: AffineVolume = collection.caseVolume(caseId, INPUT_GROUP)
	except (NeuroPipeError, OSError) as e:
		raise StageError(caseId, "load", e) from e
	logger.info(f"Case {caseId!r}: loaded {volume.shape} in {_elapsed(started)}.")
	started = time.perf_counter()
	try:
		volume = chainApplyVolume(chain, volume, group=INPUT_GROUP)
	except NeuroPipeError as e:
		raise StageError(caseId, "preprocess", e) from e
	logger.info(f"Case {caseId!r}: preprocessed with {len(chain)} steps in {_elapsed(started)}.")
	outputs: dict[str, AffineVolume] = {}
	for stage in config.models:
		started = time.perf_counter()
		plan: PlanParams = stage.plan if overlap is None else stage.plan.withOverlap(overlap)
		try:
			features: AffineVolume = stackChannels([volume, *(outputs[name] for name in stage.feed)])
			outputs[stage.name] = inferVolume(
				models[stage.name],
				features,
				plan,
				config.postprocess,
				threads=threads,
				related={INPUT_GROUP: volume},
			)
		except NeuroPipeError as e:
			raise StageError(caseId, f"model {stage.name}", e) from e
		logger.info(f"Case {caseId!r}: stage {stage.name!r} finished in {_elapsed(started)}.")
	return outputs


def _elapsed(started: float) -> str:
	return f"{(time.perf_counter() - started) * 1000:.0f} ms"


def writeOutputs(
	config: PipelineConfig, outputs: Mapping[str, AffineVolume], directory: PathType, caseId: str
) -> dict[str, Path]:
	"""
	Writes the declared outputs of a case.

	Args:
		config: The pipeline.
		outputs: The stage outputs.
		directory: The destination directory.
		caseId: The case, substituted for `{case}` in file name templates.

	Returns:
		The written paths by stage name.
	"""
	written: dict[str, Path] = {}
	for name, template in config.outputs.items():
		path: Path = Path(directory) / template.format(case=caseId)
		writeNifti(outputs[name], path, gzip=path.name.endswith(".gz"))
		written[name] = path
	return written


def runPipeline(
	config: PipelineConfig,
	collection: DataCollection,
	outputRoot: PathType,
	*,
	models: Optional[Mapping[str, Model]] = None,
	registry: Optional[ModelRegistry] = None,
	modelPaths: Optional[Mapping[str, PathType]] = None,
	skip: Iterable[str] = (),
	overlap: Optional[float] = None,
	threads: int = 1,
	workers: int = 1,
	caseDirectories: Optional[bool] = None,
) -> PipelineResult:
	"""
	Runs a pipeline on every case of a collection.

	A failing case is reported and the remaining cases still run.

	Args:
		config: The pipeline.
		collection: The input collection, as built by `inputCollection`.
		outputRoot: The output directory.
		models: Already bound models by stage name; bound from the registry otherwise.
		registry: Resolves stage sources.
		modelPaths: Model files by stage name, bypassing the registry.
		skip: Names of preprocessing steps to leave out.
		overlap: Overrides the overlap of every stage plan.
		threads: The number of patch batches evaluated concurrently.
		workers: The number of cases processed concurrently.
		caseDirectories: Write each case to a subdirectory named after it; by default only when there
			is more than one case.

	Returns:
		The written files and the failures.

	Raises:
		ConfigError: A skipped step does not exist.
		ShapeMismatchError: A model does not take the channels its stage receives.
	"""
	preprocess: TransformChain = config.preprocess.without(skip)
	bound: Mapping[str, Model] = (
		models if models is not None else bindModels(config, registry=registry, modelPaths=modelPaths)
	)
	for stage in config.models:
		requireInputChannels(config, stage, bound[stage.name])
	perCase: bool = len(collection) > 1 if caseDirectories is None else caseDirectories
	result = PipelineResult()

	def run(caseId: str) -> tuple[str, Optional[dict[str, Path]], Optional[str]]:
		try:
			outputs: dict[str, AffineVolume] = processCase(
				config, bound, collection, caseId, preprocess=preprocess, overlap=overlap, threads=threads
			)
			directory: Path = Path(outputRoot) / caseId if perCase else Path(outputRoot)
			try:
				return caseId, writeOutputs(config, outputs, directory, caseId), None
			except (NeuroPipeError, OSError) as e:
				raise StageError(caseId, "write", e) from e
		except StageError as e:
			logger.error(str(e))
			return caseId, None, str(e)

	if workers > 1:
		with ThreadPoolExecutor(max_workers=workers) as executor:
			reports = list(executor.map(run, collection.caseIds))
	else:
		reports = [run(caseId) for caseId in collection.caseIds]
	for caseId, written, failure in reports:
		if written is not None:
			result.outputs[caseId] = written
		if failure is not None:
			result.failures[caseId] = failure
	logger.info(
		f"Pipeline {config.name!r}: {len(result.outputs)} cases succeeded, {len(result.failures)} failed."
	)
	return result


@dataclass(frozen=True)
class TrainingRun:
	"""The outcome of `runTraining`."""

	modelPath: Path
	history: list[JSONObjectType]
	model: Model


def _resolve(base: Path, value: Any) -> Path:
	path = Path(str(value)).expanduser()
	return path if path.is_absolute() else base / path


def collectionFromSpec(spec: JSONMappingType, base: Path) -> DataCollection:  # NOQA: C901
	"""
	Builds a training collection from its JSON description.

	Args:
		spec: One of `{"csv": path}`, `{"directory": path, "patterns": {group: [pattern, ...]}}`,
			or `{"synthetic": "disk" | "phantom", ...}` with the generator's keyword arguments.
		base: The directory relative paths resolve against.

	Returns:
		The collection.

	Raises:
		ConfigError: The description is invalid.
	"""
	if "csv" in spec:
		return collectionFromCsv(_resolve(base, spec["csv"]))
	if "directory" in spec:
		patterns: Any = spec.get("patterns")
		if not isinstance(patterns, Mapping) or not patterns:
			raise ConfigError("collection.patterns", "expected patterns by group")
		return collectionFromDirectory(
			_resolve(base, spec["directory"]),
			{str(group): [str(item) for item in items] for group, items in patterns.items()},
		)
	kind: Any = spec.get("synthetic")
	count: int = int(spec.get("count", 4))
	seed: int = int(spec.get("seed", 0))
	if kind == "disk":
		shape: ShapeType = tuple(int(i) for i in spec.get("shape", (16, 16)))
		return diskCollection(count, shape, seed=seed, noise=float(spec.get("noise", 0.05)))
	if kind == "phantom":
		shape = tuple(int(i) for i in spec.get("shape", (32, 32, 8)))
		return phantomCollection(
			count,
			shape,
			seed=seed,
			inputs=[str(i) for i in spec.get("inputs", ("flair", "t1post"))],
			labels=[str(i) for i in spec.get("labels", ("brain_mask",))],
		)
	raise ConfigError("collection", "expected a csv, directory, or synthetic source")


def runTraining(
	config: JSONMappingType, *, base: Optional[PathType] = None, resume: bool = False
) -> TrainingRun:
	"""
	Trains a U-Net from a JSON training description.

	Every part of the description is validated before any data is read. The description holds
	`collection`, optional `preprocess` and `augmentation` lists, `unet`, `training`, `output`, and an
	optional `seed` that drives parameter initialization and augmentation.

	Args:
		config: The training description.
		base: The directory relative paths resolve against; the working directory by default.
		resume: Continue from the training checkpoint if it exists.

	Returns:
		The saved model path, the history, and the trained model.

	Raises:
		ConfigError: The description is invalid.
	"""
	known: set[str] = {"collection", "preprocess", "augmentation", "unet", "training", "output", "seed"}
	unknown: set[str] = set(config) - known
	if unknown:
		raise ConfigError(sorted(unknown)[0], "unknown training description field")
	root: Path = Path(base) if base is not None else Path.cwd()
	for key in ("collection", "unet", "output"):
		if key not in config:
			raise ConfigError(key, "is required")
	try:
		unetConfig: UNetConfig = UNetConfig.fromDict(config["unet"])
	except ConfigError as e:
		raise ConfigError(f"unet.{e.field}", str(e).partition(": ")[2]) from e
	seed: int = int(config.get("seed", 0))
	trainingSpec: dict[str, Any] = {"seed": seed, **dict(config.get("training") or {})}
	for key in ("checkpoint_path", "history_path"):
		if trainingSpec.get(key) is not None:
			trainingSpec[key] = str(_resolve(root, trainingSpec[key]))
	try:
		trainingConfig: TrainingConfig = TrainingConfig.fromDict(trainingSpec)
	except ConfigError as e:
		raise ConfigError(f"training.{e.field}", str(e).partition(": ")[2]) from e
	preprocess: TransformChain = TransformChain.fromSpec(config.get("preprocess") or ())
	nodes: list[AugmentationNode] = augmentationFromSpec(config.get("augmentation") or ())
	output: Path = _resolve(root, config["output"])
	model: Model = buildUnet(unetConfig, seed)
	started: float = time.perf_counter()
	collection: DataCollection = collectionFromSpec(config["collection"], root)
	if len(preprocess):
		collection = chainApplyCollection(preprocess, collection)
	stream = expand(collection, nodes, seed)
	logger.info(f"Training on {len(stream)} samples from {len(collection)} cases.")
	history: list[JSONObjectType] = train(model, stream, trainingConfig, resume=resume)
	model.metadata["seed"] = seed
	saveModel(model, output)
	logger.info(f"Saved model to {output} after {len(history)} steps in {_elapsed(started)}.")
	return TrainingRun(output, history, model)


@dataclass(frozen=True)
class ToyModel:
	"""How the tiny stand-in model of one pipeline stage is trained on head phantoms."""

	pipeline: str
	stage: str
	label: str
	patchShape: ShapeType
	poolSize: ShapeType
	volumeShape: ShapeType
	feedLabels: tuple[str, ...] = ()
	"""Phantom labels standing in for the outputs fed from earlier stages."""
	cases: int = 3
	steps: int = 60


TOY_MODELS: tuple[ToyModel, ...] = (
	ToyModel("skullstrip", "skullstrip", "brain_mask", (16, 16, 4), (2, 2, 1), (32, 32, 8)),
	ToyModel("segment_gbm", "whole_tumor", "whole_tumor", (8, 8, 8), (2, 2, 2), (24, 24, 24)),
	ToyModel(
		"segment_gbm",
		"enhancing_tumor",
		"enhancing_tumor",
		(8, 8, 8),
		(2, 2, 2),
		(24, 24, 24),
		("whole_tumor",),
	),
)


def toyUnetConfig(toy: ToyModel, channels: int) -> UNetConfig:
	"""
	Returns the small U-Net configuration of a toy model.

	Args:
		toy: The toy model.
		channels: The input channel count.

	Returns:
		The configuration.
	"""
	return UNetConfig(
		inputShape=(*toy.patchShape, channels),
		depth=2,
		maxFilter=8,
		poolSize=toy.poolSize,
		kernelSize=(3,) * len(toy.patchShape),
		batchNorm=False,
		initialLearningRate=0.01,
	)


def toyCollection(toy: ToyModel, config: PipelineConfig, seed: int) -> DataCollection:
	"""
	Builds the preprocessed phantom collection a toy model trains on.

	Fed labels are appended after preprocessing, the way a cascade appends predicted masks.

	Args:
		toy: The toy model.
		config: The pipeline the toy model serves.
		seed: The phantom seed.

	Returns:
		A collection whose input channels match the stage.
	"""
	sequences: list[str] = [binding.channel for binding in config.inputs]
	raw: DataCollection = phantomCollection(
		toy.cases, toy.volumeShape, seed=seed, inputs=sequences, labels=[toy.label, *toy.feedLabels]
	)
	processed: DataCollection = chainApplyCollection(config.preprocess, raw)
	volumes: dict[str, dict[str, AffineVolume]] = {}
	for caseId in processed.caseIds:
		labels: AffineVolume = processed.caseVolume(caseId, LABEL_GROUP)
		features: AffineVolume = processed.caseVolume(caseId, INPUT_GROUP)
		fed: list[AffineVolume] = [labels.channel(index + 1) for index in range(len(toy.feedLabels))]
		volumes[caseId] = {INPUT_GROUP: stackChannels([features, *fed]), LABEL_GROUP: labels.channel(0)}
	groups: list[DataGroup] = [
		DataGroup(INPUT_GROUP, (*sequences, *toy.feedLabels)),
		DataGroup(LABEL_GROUP, (toy.label,)),
	]
	return DataCollection.fromStackedVolumes(groups, volumes)


def installToyModels(
	registry: ModelRegistry, directory: Optional[PathType] = None, *, seed: int = 0
) -> dict[str, Path]:
	"""
	Trains the toy models of the shipped pipelines and registers them in the cache manifest.

	Args:
		registry: The registry to register the models with.
		directory: Where to write the model files; the registry's toy directory by default.
		seed: Seeds phantoms, initialization, and training.

	Returns:
		The model files by registry name.
	"""
	destination: Path = Path(directory) if directory is not None else registry.cacheRoot / "toy"
	installed: dict[str, Path] = {}
	for toy in TOY_MODELS:
		config: PipelineConfig = loadPipeline(toy.pipeline)
		stage: ModelStage = config.stage(toy.stage)
		collection: DataCollection = toyCollection(toy, config, seed)
		unetConfig: UNetConfig = toyUnetConfig(toy, config.stageChannels(stage))
		model: Model = buildUnet(unetConfig, seed)
		patchParams: JSONObjectType = {"shape": list(toy.patchShape), "count": 4, "label_fraction": 0.5}
		patches: list[AugmentationNode] = augmentationFromSpec(
			[{"kind": "patch_extract", "params": patchParams}]
		)
		stream = expand(collection, patches, seed)
		train(model, stream, TrainingConfig(batchSize=4, steps=toy.steps, seed=seed))
		model.metadata.update({"toy": True, "pipeline": toy.pipeline, "stage": toy.stage})
		path: Path = destination / f"{stage.source}.dnmd"
		saveModel(model, path)
		registry.registerLocal(stage.source, path, version="toy", config=unetConfig.toDict())
		installed[stage.source] = path
		logger.info(f"Installed toy model {stage.source!r} at {path}.")
	return installed

