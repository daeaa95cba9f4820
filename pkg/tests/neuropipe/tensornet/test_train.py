# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.


# Future Modules:
from __future__ import annotations

# Built-in Modules:
import json
import tempfile
from pathlib import Path
from typing import Any
from unittest import TestCase
from unittest.mock import Mock, patch

# Third-party Modules:
import numpy as np

# NeuroPipe Modules:
from neuropipe.augment import augmentationFromSpec, expand
from neuropipe.collection import INPUT_GROUP, LABEL_GROUP, DataCollection, DataGroup
from neuropipe.errors import ConfigError, ShapeMismatchError
from neuropipe.synthetic import diskCollection
from neuropipe.tensornet.losses import softDice
from neuropipe.tensornet.model import Model
from neuropipe.tensornet.serialize import readModelFile
from neuropipe.tensornet.tensor import Tensor
from neuropipe.tensornet.train import BEST_SUFFIX, NonFiniteLossError, TrainingConfig, epochOrder, train
from neuropipe.tensornet.unet import UNetConfig, buildUnet


def diskModel(seed: int = 0, **overrides: Any) -> Model:
	values: dict[str, Any] = {"depth": 2, "maxFilter": 8, "initialLearningRate": 0.01, "bnMomentum": 0.9}
	values.update(overrides)
	return buildUnet(UNetConfig((16, 16, 1), **values), seed=seed)


def diceScore(prediction: np.ndarray, target: np.ndarray) -> float:
	predicted: np.ndarray = prediction > 0.5
	truth: np.ndarray = target > 0.5
	return float(2 * (predicted & truth).sum() / (predicted.sum() + truth.sum()))


def assertSameParameters(test: TestCase, first: Model, second: Model) -> None:
	test.assertEqual(set(first.parameters), set(second.parameters))
	for name, array in first.parameterArrays().items():
		test.assertEqual(array.tobytes(), second.parameterArrays()[name].tobytes(), name)


class TestTrainingConfig(TestCase):
	def testFromDict(self) -> None:
		config = TrainingConfig.fromDict({"batch_size": 4, "epochs": 3, "checkpoint_path": "model.dnmd"})
		self.assertEqual(config.batchSize, 4)
		self.assertEqual(config.epochs, 3)
		self.assertEqual(config.bestPath, "model.dnmd" + BEST_SUFFIX)
		self.assertIsNone(TrainingConfig().bestPath)

	def testInvalid(self) -> None:
		for data, field in (
			({"batch_size": 0}, "batch_size"),
			({"steps": 3, "epochs": 1}, "steps"),
			({"steps": -1}, "steps"),
			({"epochs": -2}, "epochs"),
			({"learning_rate": -0.1}, "learning_rate"),
			({"momentum": 0.9}, "momentum"),
		):
			with self.subTest(field=field), self.assertRaises(ConfigError) as context:
				TrainingConfig.fromDict(data)
			self.assertEqual(context.exception.field, field)


class TestEpochOrder(TestCase):
	def testPermutation(self) -> None:
		order = epochOrder(1, 0, 10)
		self.assertEqual(sorted(order.tolist()), list(range(10)))
		np.testing.assert_array_equal(order, epochOrder(1, 0, 10))
		self.assertFalse(np.array_equal(order, epochOrder(1, 1, 10)))


class TestTrain(TestCase):
	def setUp(self) -> None:
		self.directory = tempfile.TemporaryDirectory()
		self.root = Path(self.directory.name)
		self.collection: DataCollection = diskCollection(4, seed=0)

	def tearDown(self) -> None:
		self.directory.cleanup()

	def testZeroLearningRateIsNullUpdate(self) -> None:
		model: Model = diskModel()
		before: Model = model.copy()
		history = train(model, self.collection, TrainingConfig(batchSize=2, steps=5, learningRate=0.0))
		self.assertEqual(len(history), 5)
		assertSameParameters(self, model, before)
		self.assertTrue(all(record["lr"] == 0.0 for record in history))

	def testZeroEpochsIsNoTraining(self) -> None:
		model: Model = diskModel()
		before: Model = model.copy()
		history = train(model, self.collection, TrainingConfig(batchSize=1, epochs=0))
		self.assertEqual(history, [])
		assertSameParameters(self, model, before)
		self.assertEqual(model.metadata["training"], {"steps": 0, "final_loss": None})

	def testOverfitsDisks(self) -> None:
		model: Model = diskModel()
		history = train(model, self.collection, TrainingConfig(batchSize=4, steps=300))
		self.assertLess(history[-1]["loss"], history[0]["loss"])
		images = np.stack([self.collection.caseTensor(caseId, INPUT_GROUP) for caseId in self.collection])
		masks = np.stack([self.collection.caseTensor(caseId, LABEL_GROUP) for caseId in self.collection])
		self.assertGreater(diceScore(model.predict(images), masks), 0.95)
		self.assertEqual(model.metadata["training"], {"steps": 300, "final_loss": history[-1]["loss"]})

	def testSeededRunsAreIdentical(self) -> None:
		config = TrainingConfig(batchSize=2, steps=6, seed=3)
		first: Model = diskModel(dropout=0.2)
		second: Model = diskModel(dropout=0.2)
		firstHistory = train(first, self.collection, config)
		secondHistory = train(second, self.collection, config)
		assertSameParameters(self, first, second)
		self.assertEqual([r["loss"] for r in firstHistory], [r["loss"] for r in secondHistory])

	def testResumeMatchesUninterruptedRun(self) -> None:
		uninterrupted: Model = diskModel()
		expected = train(
			uninterrupted,
			self.collection,
			TrainingConfig(batchSize=2, steps=7, seed=5, checkpointPath=str(self.root / "full.dnmd")),
		)
		checkpoint: str = str(self.root / "partial.dnmd")
		partial = TrainingConfig(batchSize=2, steps=3, seed=5, checkpointPath=checkpoint)
		train(diskModel(), self.collection, partial)
		self.assertEqual(readModelFile(checkpoint).training["step"], 3)
		# A fresh model with other initial weights picks everything up from the checkpoint.
		resumed: Model = diskModel(seed=99)
		history = train(
			resumed,
			self.collection,
			TrainingConfig(batchSize=2, steps=7, seed=5, checkpointPath=checkpoint),
			resume=True,
		)
		assertSameParameters(self, resumed, uninterrupted)
		for name, array in uninterrupted.state.items():
			self.assertEqual(array.tobytes(), resumed.state[name].tobytes(), name)
		self.assertEqual([r["loss"] for r in history], [r["loss"] for r in expected])

	def testResumeWithoutCheckpointStartsFresh(self) -> None:
		config = TrainingConfig(batchSize=2, steps=2, checkpointPath=str(self.root / "absent.dnmd"))
		self.assertEqual(len(train(diskModel(), self.collection, config, resume=True)), 2)

	def testCheckpointsAndHistory(self) -> None:
		checkpoint: Path = self.root / "run" / "model.dnmd"
		historyPath: Path = self.root / "run" / "history.jsonl"
		callback = Mock()
		config = TrainingConfig(
			batchSize=2, epochs=2, checkpointPath=str(checkpoint), historyPath=str(historyPath)
		)
		with self.assertLogs("neuropipe.tensornet.train", level="INFO") as logs:
			history = train(diskModel(), self.collection, config, callbacks=[callback])
		self.assertEqual(len(history), 4)
		self.assertEqual([record["step"] for record in history], [1, 2, 3, 4])
		self.assertEqual(callback.call_count, 4)
		callback.assert_called_with(history[-1])
		records = [json.loads(line) for line in historyPath.read_text().splitlines()]
		self.assertEqual(records, history)
		self.assertEqual(set(records[0]), {"step", "loss", "lr", "wall_ms"})
		self.assertEqual(readModelFile(checkpoint).training["step"], 4)
		self.assertTrue(Path(str(checkpoint) + BEST_SUFFIX).exists())
		self.assertTrue(any("Epoch 2 finished" in line for line in logs.output))

	def testAugmentedStream(self) -> None:
		nodes = augmentationFromSpec(
			[
				{"kind": "flip", "multiplicity": 2},
				{"kind": "patch_extract", "params": {"shape": [8, 8], "count": 2, "label_fraction": 0.5}},
			]
		)
		stream = expand(self.collection, nodes, 0)
		model: Model = buildUnet(UNetConfig((8, 8, 1), depth=1, maxFilter=4), seed=0)
		history = train(model, stream, TrainingConfig(batchSize=4, epochs=1))
		self.assertEqual(len(history), 4)

	def testNonFiniteLossKeepsLastCheckpoint(self) -> None:
		checkpoint: str = str(self.root / "model.dnmd")
		calls: list[int] = []

		def failingLoss(prediction: Tensor, target: np.ndarray) -> Tensor:
			calls.append(1)
			if len(calls) == 3:
				return Tensor(np.float32("nan"))
			return softDice(prediction, target)

		with patch("neuropipe.tensornet.train.lossFunction", return_value=failingLoss):
			with self.assertRaises(NonFiniteLossError) as context:
				config = TrainingConfig(batchSize=2, epochs=3, checkpointPath=checkpoint)
				train(diskModel(), self.collection, config)
		self.assertEqual(context.exception.step, 2)
		self.assertEqual(readModelFile(checkpoint).training["step"], 2)

	def testSamplesMustFitTheModel(self) -> None:
		model: Model = buildUnet(UNetConfig((8, 8, 1), depth=1, maxFilter=4))
		with self.assertRaises(ShapeMismatchError):
			train(model, self.collection, TrainingConfig(steps=1))
		twoOutputs: Model = diskModel(numOutputs=2)
		with self.assertRaises(ShapeMismatchError):
			train(twoOutputs, self.collection, TrainingConfig(steps=1))
		empty = DataCollection([DataGroup(INPUT_GROUP, ("image",)), DataGroup(LABEL_GROUP, ("disk",))], [])
		with self.assertRaises(ShapeMismatchError):
			train(diskModel(), empty, TrainingConfig(steps=1))

	def testIndivisibleShapeFailsBeforeTraining(self) -> None:
		with self.assertRaises(ConfigError) as context:
			UNetConfig((15, 16, 1), depth=2)
		self.assertIn("axis 0", str(context.exception))
