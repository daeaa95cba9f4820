"""
The command line interface.

Exit codes: 0 on success, 1 when processing fails, 2 for usage and configuration errors.
"""


# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Optional

# Local Modules:
from . import __version__
from .collection import DataCollection
from .errors import ConfigError, NeuroPipeError, ShapeMismatchError
from .pipeline import (
	PIPELINE_NAMES,
	PipelineConfig,
	PipelineResult,
	casesFromCsv,
	inputCollection,
	installToyModels,
	loadPipeline,
	runPipeline,
	runTraining,
)
from .registry import ModelRegistry
from .typedef import PathType


EXIT_SUCCESS: int = 0
EXIT_FAILURE: int = 1
EXIT_USAGE: int = 2


logger: logging.Logger = logging.getLogger(__name__)


def _commandName(pipeline: str) -> str:
	return pipeline.replace("_", "-")


def _modelOverride(value: str) -> tuple[str, str]:
	stage, separator, path = value.partition("=")
	if not separator or not stage or not path:
		raise argparse.ArgumentTypeError(f"expected STAGE=PATH, got {value!r}")
	return stage, path


def _overlap(value: str) -> float:
	try:
		fraction: float = float(value)
	except ValueError:
		raise argparse.ArgumentTypeError(f"invalid overlap {value!r}") from None
	if not 0.0 <= fraction < 1.0:
		raise argparse.ArgumentTypeError(f"overlap must be in [0, 1), not {fraction}")
	return fraction


def _positive(value: str) -> int:
	try:
		number: int = int(value)
	except ValueError:
		raise argparse.ArgumentTypeError(f"invalid count {value!r}") from None
	if number < 1:
		raise argparse.ArgumentTypeError(f"expected at least 1, got {number}")
	return number


def _addPipelineParser(subparsers: Any, config: PipelineConfig) -> None:
	parser: argparse.ArgumentParser = subparsers.add_parser(
		_commandName(config.name), help=config.description, description=config.description
	)
	parser.set_defaults(pipeline=config.name, commandParser=parser)
	for binding in config.inputs:
		parser.add_argument(
			f"--{binding.flag.replace('_', '-')}",
			dest=f"input_{binding.channel}",
			metavar="PATH",
			help=binding.help or f"The {binding.channel} volume.",
		)
	parser.add_argument(
		"--cases",
		metavar="CSV",
		help="Process a batch: a CSV with a case column and one input_data:<channel> column per input.",
	)
	parser.add_argument("--output", "-o", required=True, metavar="DIR", help="The output directory.")
	parser.add_argument(
		"--skip-preprocess",
		action="append",
		default=[],
		metavar="STEP",
		help="Leave out a named preprocessing step. May be repeated.",
	)
	parser.add_argument("--overlap", type=_overlap, help="Overrides the patch overlap fraction.")
	parser.add_argument("--threads", type=_positive, default=1, help="Patch batches predicted at once.")
	parser.add_argument("--workers", type=_positive, default=1, help="Cases processed at once.")
	parser.add_argument("--seed", type=int, default=0, help="Logged with the run.")
	parser.add_argument(
		"--model",
		type=_modelOverride,
		action="append",
		default=[],
		metavar="STAGE=PATH",
		help="Use a model file for a stage instead of the registry. May be repeated.",
	)


def buildParser(configs: Sequence[PipelineConfig]) -> argparse.ArgumentParser:
	"""
	Creates the argument parser.

	Args:
		configs: The pipelines exposed as subcommands.

	Returns:
		The parser.
	"""
	parser = argparse.ArgumentParser(prog="neuropipe", description="Neuroimaging deep learning pipelines.")
	parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
	verbosity = parser.add_mutually_exclusive_group()
	verbosity.add_argument("--verbose", "-v", action="store_true", help="Log stage progress and timings.")
	verbosity.add_argument("--debug", action="store_true", help="Log everything.")
	subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
	for config in configs:
		_addPipelineParser(subparsers, config)
	trainParser = subparsers.add_parser("train", help="Train a U-Net from a JSON description.")
	trainParser.add_argument("--config", required=True, metavar="JSON", help="The training description.")
	trainParser.add_argument("--resume", action="store_true", help="Continue from the training checkpoint.")
	modelParser = subparsers.add_parser("model", help="Manage the model cache.")
	modelCommands = modelParser.add_subparsers(dest="model_command", metavar="ACTION", required=True)
	fetchParser = modelCommands.add_parser("fetch", help="Download and verify a model.")
	fetchParser.add_argument("name")
	deleteParser = modelCommands.add_parser("delete", help="Remove a model from the cache.")
	deleteParser.add_argument("name")
	modelCommands.add_parser("list", help="List the models in the manifest.")
	toyParser = modelCommands.add_parser("install-toy", help="Train and register the toy pipeline models.")
	toyParser.add_argument("--directory", metavar="DIR", help="Where to write the model files.")
	toyParser.add_argument("--seed", type=int, default=0)
	return parser


def configureLogging(verbose: bool = False, debug: bool = False) -> None:
	"""
	Configures the root logger.

	Args:
		verbose: Log at INFO.
		debug: Log at DEBUG.
	"""
	level: int = logging.DEBUG if debug else logging.INFO if verbose else logging.WARNING
	logging.basicConfig(
		level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True
	)


def _pipelineInputs(config: PipelineConfig, args: argparse.Namespace) -> DataCollection:
	if args.cases is not None:
		return casesFromCsv(config, args.cases)
	missing: list[str] = [
		f"--{binding.flag.replace('_', '-')}"
		for binding in config.inputs
		if getattr(args, f"input_{binding.channel}") is None
	]
	if missing:
		args.commandParser.error(f"the following arguments are required: {', '.join(missing)}")
	paths: dict[str, PathType] = {
		binding.channel: getattr(args, f"input_{binding.channel}") for binding in config.inputs
	}
	for channel, path in paths.items():
		if not Path(path).is_file():
			raise ConfigError(channel, f"no such file {path}")
	return inputCollection(config, {"case": paths})


def runPipelineCommand(config: PipelineConfig, args: argparse.Namespace) -> int:
	"""
	Runs a pipeline subcommand.

	Args:
		config: The pipeline.
		args: The parsed arguments.

	Returns:
		The exit code.
	"""
	collection: DataCollection = _pipelineInputs(config, args)
	logger.info(f"Running {config.name} on {len(collection)} cases with seed {args.seed}.")
	result: PipelineResult = runPipeline(
		config,
		collection,
		args.output,
		modelPaths=dict(args.model),
		skip=args.skip_preprocess,
		overlap=args.overlap,
		threads=args.threads,
		workers=args.workers,
		caseDirectories=args.cases is not None,
	)
	for caseId, paths in sorted(result.outputs.items()):
		for name, path in sorted(paths.items()):
			print(f"{caseId}\t{name}\t{path}")
	for caseId, message in sorted(result.failures.items()):
		print(f"FAILED {caseId}: {message}", file=sys.stderr)
	return result.exitCode


def runModelCommand(args: argparse.Namespace) -> int:
	"""
	Runs a model cache subcommand.

	Args:
		args: The parsed arguments.

	Returns:
		The exit code.
	"""
	registry = ModelRegistry()
	if args.model_command == "fetch":
		print(registry.fetch(args.name))
	elif args.model_command == "delete":
		registry.delete(args.name)
	elif args.model_command == "list":
		for entry, cached in registry.listEntries():
			status: str = "cached" if cached else "remote"
			print(f"{entry.name}\t{entry.version}\t{status}\t{entry.sha256[:12]}\t{entry.url}")
	else:
		for name, path in sorted(installToyModels(registry, args.directory, seed=args.seed).items()):
			print(f"{name}\t{path}")
	return EXIT_SUCCESS


def runTrainCommand(args: argparse.Namespace) -> int:
	"""
	Runs the train subcommand.

	Args:
		args: The parsed arguments.

	Returns:
		The exit code.
	"""
	path = Path(args.config)
	try:
		description: Any = json.loads(path.read_text(encoding="utf-8"))
	except json.JSONDecodeError as e:
		raise ConfigError("config", f"invalid JSON in {path}: {e}") from None
	if not isinstance(description, dict):
		raise ConfigError("config", "the training description must be an object")
	run = runTraining(description, base=path.resolve().parent, resume=args.resume)
	final: str = f"{run.history[-1]['loss']:.6f}" if run.history else "n/a"
	print(f"{run.modelPath}\tsteps={len(run.history)}\tloss={final}")
	return EXIT_SUCCESS


def main(argv: Optional[Sequence[str]] = None) -> int:
	"""
	Runs the command line interface.

	Args:
		argv: The arguments, without the program name; sys.argv by default.

	Returns:
		The exit code.
	"""
	configs: dict[str, PipelineConfig] = {name: loadPipeline(name) for name in PIPELINE_NAMES}
	parser: argparse.ArgumentParser = buildParser(list(configs.values()))
	args: argparse.Namespace = parser.parse_args(argv)
	configureLogging(args.verbose, args.debug)
	try:
		if args.command == "train":
			return runTrainCommand(args)
		if args.command == "model":
			return runModelCommand(args)
		return runPipelineCommand(configs[args.pipeline], args)
	except (ConfigError, ShapeMismatchError) as e:
		print(f"neuropipe: error: {e}", file=sys.stderr)
		return EXIT_USAGE
	except (NeuroPipeError, OSError) as e:
		logger.debug("Command failed.", exc_info=True)
		print(f"neuropipe: error: {e}", file=sys.stderr)
		return EXIT_FAILURE
