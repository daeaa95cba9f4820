# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.


# Future Modules:
from __future__ import annotations

# Built-in Modules:
from unittest import TestCase

# Third-party Modules:
import numpy as np

# NeuroPipe Modules:
from neuropipe.collection import INPUT_GROUP, DataCollection, UnknownCaseError
from neuropipe.errors import ConfigError, ShapeMismatchError
from neuropipe.infer import (
	BadOverlapError,
	InferenceError,
	PadMode,
	PatchExceedsVolumeError,
	PatchPlan,
	PlanParams,
	inferCase,
	inferVolume,
	planPatches,
	runPatchedInference,
)
from neuropipe.synthetic import diskCollection
from neuropipe.tensornet.unet import UNetConfig, buildUnet
from neuropipe.transforms import postprocessChain
from neuropipe.volume import AffineVolume


class IdentityModel:
	"""Echoes the first input channel, counting calls."""

	def __init__(self, inputShape: tuple[int, ...], outputs: int = 1) -> None:
		self.inputShape: tuple[int, ...] = inputShape
		self.numOutputs: int = outputs
		self.batchSizes: list[int] = []

	def predict(self, batch: np.ndarray) -> np.ndarray:
		self.batchSizes.append(len(batch))
		return np.repeat(batch[..., :1], self.numOutputs, axis=-1)


class ConstantModel(IdentityModel):
	"""Predicts the index of every call, so overlaps average distinct values."""

	def predict(self, batch: np.ndarray) -> np.ndarray:
		self.batchSizes.append(len(batch))
		return np.full((*batch.shape[:-1], self.numOutputs), float(len(self.batchSizes)), dtype=np.float32)


def axisStarts(plan: PatchPlan, axis: int) -> list[int]:
	return sorted({offset[axis] for offset in plan.offsets})


class TestPlanPatches(TestCase):
	def testExactTiling(self) -> None:
		plan: PatchPlan = planPatches((64, 64, 64), (32, 32, 32))
		self.assertEqual(axisStarts(plan, 0), [0, 32])
		self.assertEqual(len(plan), 8)
		self.assertEqual(plan.pad, ((0, 0),) * 3)
		self.assertEqual(plan.paddedShape, (64, 64, 64))

	def testClampedFinalPatchWithoutPadding(self) -> None:
		plan: PatchPlan = planPatches((70, 70, 70), (32, 32, 32), padMode="none")
		self.assertEqual(axisStarts(plan, 0), [0, 32, 38])
		self.assertEqual(len(plan), 27)
		self.assertEqual(plan.padMode, PadMode.NONE)
		self.assertTrue(np.all(plan.coverage() >= 1))

	def testPaddingIsSplitEvenly(self) -> None:
		plan: PatchPlan = planPatches((70, 64), (32, 32))
		self.assertEqual(plan.pad, ((13, 13), (0, 0)))
		self.assertEqual(plan.paddedShape, (96, 64))
		self.assertEqual(axisStarts(plan, 0), [0, 32, 64])
		np.testing.assert_array_equal(plan.coverage(), 1)

	def testOverlapStride(self) -> None:
		plan: PatchPlan = planPatches((64,), (32,), overlap=0.5)
		self.assertEqual(axisStarts(plan, 0), [0, 16, 32])
		perAxis: PatchPlan = planPatches((64, 64), (32, 32), overlap=(0.5, 0.0))
		self.assertEqual(axisStarts(perAxis, 0), [0, 16, 32])
		self.assertEqual(axisStarts(perAxis, 1), [0, 32])

	def testHighOverlapKeepsUnitStride(self) -> None:
		plan: PatchPlan = planPatches((5,), (2,), overlap=0.9)
		self.assertEqual(axisStarts(plan, 0), [0, 1, 2, 3])

	def testPatchLargerThanVolume(self) -> None:
		plan: PatchPlan = planPatches((20, 40), (32, 32))
		self.assertEqual(plan.paddedShape, (32, 64))
		self.assertEqual(plan.pad, ((6, 6), (12, 12)))
		with self.assertRaises(PatchExceedsVolumeError):
			planPatches((20, 40), (32, 32), padMode=PadMode.NONE)

	def testOffsetsAreSorted(self) -> None:
		plan: PatchPlan = planPatches((40, 40, 20), (16, 16, 8), overlap=0.25)
		self.assertEqual(list(plan.offsets), sorted(plan.offsets))

	def testInvalid(self) -> None:
		with self.assertRaises(BadOverlapError):
			planPatches((64,), (32,), overlap=1.0)
		with self.assertRaises(BadOverlapError):
			planPatches((64,), (32,), overlap=-0.1)
		with self.assertRaises(ShapeMismatchError):
			planPatches((64, 64), (32,))
		with self.assertRaises(ShapeMismatchError):
			planPatches((64,), (0,))
		with self.assertRaises(ShapeMismatchError):
			planPatches((64, 64), (32, 32), overlap=(0.5,))
		with self.assertRaises(ValueError):
			planPatches((64,), (32,), padMode="edge")

	def testToDict(self) -> None:
		data = planPatches((70,), (32,), padMode="reflect").toDict()
		self.assertEqual(data["pad"], [[13, 13]])
		self.assertEqual(data["offsets"], [[0], [32], [64]])
		self.assertEqual(data["pad_mode"], "reflect")


class TestRunPatchedInference(TestCase):
	def setUp(self) -> None:
		rng = np.random.default_rng(0)
		affine = np.diag([2.0, 2.0, 3.0, 1.0])
		self.volume = AffineVolume(rng.standard_normal((20, 18, 9, 2)).astype(np.float32), affine)

	def testIdentityReconstruction(self) -> None:
		for mode in PadMode:
			for overlap in (0.0, 0.5):
				with self.subTest(mode=mode, overlap=overlap):
					model = IdentityModel((8, 8, 4, 2))
					plan: PatchPlan = planPatches(self.volume.spatialShape, (8, 8, 4), overlap, mode)
					result: AffineVolume = runPatchedInference(model, self.volume, plan, batchSize=5)
					self.assertEqual(result.shape, (20, 18, 9, 1))
					np.testing.assert_allclose(result.data[..., 0], self.volume.data[..., 0], atol=1e-6)
					np.testing.assert_array_equal(result.affine, self.volume.affine)

	def testBatching(self) -> None:
		model = IdentityModel((8, 8, 4, 2))
		plan: PatchPlan = planPatches(self.volume.spatialShape, (8, 8, 4))
		runPatchedInference(model, self.volume, plan, batchSize=4)
		self.assertEqual(sum(model.batchSizes), len(plan))
		self.assertTrue(all(size <= 4 for size in model.batchSizes))
		self.assertEqual(len(model.batchSizes), -(-len(plan) // 4))

	def testOverlapsAreAveraged(self) -> None:
		volume = AffineVolume(np.zeros((12, 1, 1), dtype=np.float32))
		plan: PatchPlan = planPatches((12, 1), (8, 1), overlap=(0.5, 0.0), padMode="none")
		self.assertEqual(plan.offsets, ((0, 0), (4, 0)))
		result: AffineVolume = runPatchedInference(ConstantModel((8, 1, 1)), volume, plan, batchSize=1)
		np.testing.assert_array_equal(result.data[:4, 0, 0], 1.0)
		np.testing.assert_array_equal(result.data[4:8, 0, 0], 1.5)
		np.testing.assert_array_equal(result.data[8:, 0, 0], 2.0)

	def testThreadCountDoesNotChangeTheResult(self) -> None:
		model = buildUnet(UNetConfig((8, 8, 4, 2), poolSize=(2, 2, 1), depth=1, maxFilter=4), seed=1)
		plan: PatchPlan = planPatches(self.volume.spatialShape, (8, 8, 4), overlap=0.5)
		serial: AffineVolume = runPatchedInference(model, self.volume, plan, batchSize=3)
		threaded: AffineVolume = runPatchedInference(model, self.volume, plan, batchSize=3, threads=4)
		self.assertEqual(serial.data.tobytes(), threaded.data.tobytes())
		self.assertTrue(np.all((serial.data >= 0) & (serial.data <= 1)))

	def testMultipleOutputs(self) -> None:
		plan: PatchPlan = planPatches(self.volume.spatialShape, (8, 8, 4))
		result: AffineVolume = runPatchedInference(IdentityModel((8, 8, 4, 2), 3), self.volume, plan)
		self.assertEqual(result.channels, 3)

	def testMismatches(self) -> None:
		plan: PatchPlan = planPatches(self.volume.spatialShape, (8, 8, 4))
		with self.assertRaises(ShapeMismatchError):
			runPatchedInference(IdentityModel((8, 8, 8, 2)), self.volume, plan)
		with self.assertRaises(ShapeMismatchError):
			runPatchedInference(IdentityModel((8, 8, 4, 1)), self.volume, plan)
		other: PatchPlan = planPatches((20, 18, 10), (8, 8, 4))
		with self.assertRaises(ShapeMismatchError):
			runPatchedInference(IdentityModel((8, 8, 4, 2)), self.volume, other)
		with self.assertRaises(ConfigError):
			runPatchedInference(IdentityModel((8, 8, 4, 2)), self.volume, plan, batchSize=0)

	def testModelReturningWrongShape(self) -> None:
		model = IdentityModel((8, 8, 4, 2))
		model.numOutputs = 2
		model.predict = lambda batch: batch[..., :1]  # type: ignore[method-assign]
		plan: PatchPlan = planPatches(self.volume.spatialShape, (8, 8, 4))
		with self.assertRaises(ShapeMismatchError):
			runPatchedInference(model, self.volume, plan)

	def testUncoveredVoxels(self) -> None:
		plan = PatchPlan((10, 1), (4, 1), ((0, 0), (4, 0)), ((0, 0), (0, 0)), (0.0, 0.0), PadMode.NONE)
		volume = AffineVolume(np.zeros((10, 1, 1), dtype=np.float32))
		with self.assertRaises(InferenceError):
			runPatchedInference(IdentityModel((4, 1, 1)), volume, plan)


class TestPlanParams(TestCase):
	def testDefaults(self) -> None:
		params: PlanParams = PlanParams.fromDict({})
		self.assertIsNone(params.patchShape)
		self.assertEqual(params.pad, PadMode.ZERO)
		self.assertEqual(PlanParams.fromDict(params.toDict()), params)

	def testParsing(self) -> None:
		params: PlanParams = PlanParams.fromDict(
			{"patch_shape": [16, 16, 8], "overlap": [0.5, 0.5, 0.0], "pad": "reflect", "batch_size": 2}
		)
		self.assertEqual(params.patchShape, (16, 16, 8))
		self.assertEqual(params.overlap, (0.5, 0.5, 0.0))
		self.assertEqual(params.withOverlap(0.25).overlap, 0.25)
		self.assertEqual(params.withOverlap(0.25).pad, PadMode.REFLECT)

	def testInvalid(self) -> None:
		for data, field in (
			({"stride": 2}, "stride"),
			({"patch_shape": ["a"]}, "patch_shape"),
			({"overlap": 1.5}, "overlap"),
			({"overlap": "half"}, "overlap"),
			({"pad": "edge"}, "pad"),
			({"batch_size": 0}, "batch_size"),
			({"batch_size": True}, "batch_size"),
		):
			with self.subTest(field=field), self.assertRaises(ConfigError) as context:
				PlanParams.fromDict(data)
			self.assertEqual(context.exception.field, field)

	def testPlanUsesModelShape(self) -> None:
		plan: PatchPlan = PlanParams().plan(IdentityModel((8, 8, 1)), (16, 12))
		self.assertEqual(plan.patchShape, (8, 8))
		self.assertEqual(plan.pad, ((0, 0), (2, 2)))


class TestInferCase(TestCase):
	def setUp(self) -> None:
		self.collection: DataCollection = diskCollection(2, seed=3)
		self.model = IdentityModel((8, 8, 1))

	def testIdentityPrediction(self) -> None:
		result: AffineVolume = inferCase(self.model, self.collection, "disk01", PlanParams(overlap=0.5))
		expected: AffineVolume = self.collection.caseVolume("disk01", INPUT_GROUP)
		np.testing.assert_allclose(result.data, expected.data, atol=1e-6)

	def testPostprocess(self) -> None:
		chain = postprocessChain([{"kind": "binarize", "params": {"threshold": 0.5}}])
		result: AffineVolume = inferCase(self.model, self.collection, "disk00", PlanParams(), chain)
		image: np.ndarray = self.collection.caseTensor("disk00", INPUT_GROUP)
		np.testing.assert_array_equal(result.data, (image > 0.5).astype(np.float32))

	def testEmptyPostprocessIsSkipped(self) -> None:
		volume: AffineVolume = self.collection.caseVolume("disk00", INPUT_GROUP)
		result: AffineVolume = inferVolume(self.model, volume, PlanParams(), postprocessChain([]))
		np.testing.assert_allclose(result.data, volume.data, atol=1e-6)

	def testUnknownCase(self) -> None:
		with self.assertRaises(UnknownCaseError):
			inferCase(self.model, self.collection, "disk99", PlanParams())


class PositionModel(IdentityModel):
	"""Squares the first channel and adds each voxel's position within the patch."""

	def predict(self, batch: np.ndarray) -> np.ndarray:
		self.batchSizes.append(len(batch))
		return np.stack([positionPrediction(patch, self.numOutputs) for patch in batch])


def positionPrediction(patch: np.ndarray, outputs: int) -> np.ndarray:
	ramp: np.ndarray = np.indices(patch.shape[:-1]).sum(axis=0).astype(np.float32)
	first: np.ndarray = patch[..., 0] * patch[..., 0] + ramp
	return np.stack([first * (index + 1) for index in range(outputs)], axis=-1).astype(np.float32)


def bruteForceInference(volume: np.ndarray, plan: PatchPlan, outputs: int) -> np.ndarray:
	widths: list[tuple[int, int]] = [*plan.pad, (0, 0)]
	mode: str = "reflect" if plan.padMode is PadMode.REFLECT else "constant"
	padded: np.ndarray = np.pad(volume, widths, mode=mode)
	sums: np.ndarray = np.zeros((*padded.shape[:-1], outputs), dtype=np.float64)
	counts: np.ndarray = np.zeros(padded.shape[:-1], dtype=np.float64)
	for offset in plan.offsets:
		window = tuple(slice(start, start + size) for start, size in zip(offset, plan.patchShape))
		sums[window] += positionPrediction(padded[window], outputs)
		counts[window] += 1
	unpad = tuple(slice(before, before + extent) for extent, (before, _) in zip(plan.volumeShape, plan.pad))
	return (sums / counts[..., np.newaxis])[unpad].astype(np.float32)


class TestPatchedInferenceProperties(TestCase):
	def testIdentityAtEveryOverlap(self) -> None:
		rng = np.random.default_rng(11)
		for number in range(6):
			shape: tuple[int, ...] = tuple(int(extent) for extent in rng.integers(5, 17, size=3))
			volume = AffineVolume(rng.standard_normal((*shape, 1)).astype(np.float32))
			patch: tuple[int, ...] = tuple(int(rng.integers(2, extent + 1)) for extent in shape)
			for mode in PadMode:
				for overlap in (0.0, 0.25, 0.5):
					with self.subTest(number=number, mode=mode, overlap=overlap):
						plan: PatchPlan = planPatches(shape, patch, overlap, mode)
						model = IdentityModel((*patch, 1))
						result: AffineVolume = runPatchedInference(model, volume, plan, 4)
						np.testing.assert_allclose(result.data, volume.data, atol=1e-6)

	def testIdentityOnUnalignedVolume(self) -> None:
		rng = np.random.default_rng(70)
		volume = AffineVolume(rng.standard_normal((70, 70, 70, 1)).astype(np.float32))
		for mode in PadMode:
			for overlap in (0.0, 0.25, 0.5):
				with self.subTest(mode=mode, overlap=overlap):
					plan: PatchPlan = planPatches((70, 70, 70), (32, 32, 32), overlap, mode)
					model = IdentityModel((32, 32, 32, 1))
					result: AffineVolume = runPatchedInference(model, volume, plan, 8)
					self.assertEqual(result.shape, (70, 70, 70, 1))
					np.testing.assert_allclose(result.data, volume.data, atol=1e-6)

	def testMatchesBruteForceAccumulation(self) -> None:
		rng = np.random.default_rng(23)
		for number in range(24):
			dims: int = int(rng.integers(2, 4))
			shape: tuple[int, ...] = tuple(int(extent) for extent in rng.integers(2, 15, size=dims))
			patch: tuple[int, ...] = tuple(int(rng.integers(1, extent + 1)) for extent in shape)
			channels: int = int(rng.integers(1, 3))
			outputs: int = int(rng.integers(1, 3))
			overlap: float = float(rng.choice([0.0, 0.25, 0.5, 0.75]))
			mode: PadMode = list(PadMode)[number % 3]
			with self.subTest(number=number, shape=shape, patch=patch, overlap=overlap, mode=mode):
				data: np.ndarray = rng.standard_normal((*shape, channels)).astype(np.float32)
				plan: PatchPlan = planPatches(shape, patch, overlap, mode)
				model = PositionModel((*patch, channels), outputs)
				result: AffineVolume = runPatchedInference(
					model, AffineVolume(data), plan, int(rng.integers(1, 6))
				)
				np.testing.assert_allclose(result.data, bruteForceInference(data, plan, outputs), rtol=1e-6)

	def testEveryVoxelIsCovered(self) -> None:
		rng = np.random.default_rng(5)
		for number in range(200):
			dims: int = int(rng.integers(1, 4))
			shape: tuple[int, ...] = tuple(int(extent) for extent in rng.integers(1, 41, size=dims))
			mode: PadMode = list(PadMode)[number % 3]
			if mode is PadMode.NONE:
				patch: tuple[int, ...] = tuple(int(rng.integers(1, extent + 1)) for extent in shape)
			else:
				patch = tuple(int(extent) for extent in rng.integers(1, 49, size=dims))
			overlap: float = float(rng.uniform(0.0, 0.95))
			with self.subTest(number=number, shape=shape, patch=patch, overlap=overlap, mode=mode):
				plan: PatchPlan = planPatches(shape, patch, overlap, mode)
				self.assertTrue(np.all(plan.coverage() >= 1))
				for offset in plan.offsets:
					self.assertTrue(
						all(start + size <= end for start, size, end in zip(offset, patch, plan.paddedShape))
					)

	def testReflectPaddingIsNeutral(self) -> None:
		rng = np.random.default_rng(17)
		for number in range(20):
			shape: tuple[int, ...] = tuple(int(extent) for extent in rng.integers(3, 20, size=3))
			patch: tuple[int, ...] = tuple(int(rng.integers(2, extent + 1)) for extent in shape)
			overlap: float = float(rng.choice([0.0, 0.25, 0.5]))
			with self.subTest(number=number, shape=shape, patch=patch, overlap=overlap):
				volume = AffineVolume(rng.standard_normal((*shape, 1)).astype(np.float32))
				plan: PatchPlan = planPatches(shape, patch, overlap, PadMode.REFLECT)
				result: AffineVolume = runPatchedInference(IdentityModel((*patch, 1)), volume, plan, 3)
				np.testing.assert_array_equal(result.data, volume.data)
