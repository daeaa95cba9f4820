# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.


# Future Modules:
from __future__ import annotations

# Built-in Modules:
import shutil
from unittest import TestCase, skipIf
from unittest.mock import patch

# Third-party Modules:
import numpy as np

# NeuroPipe Modules:
from neuropipe.collection import INPUT_GROUP, LABEL_GROUP, PREDICTION_GROUP, DataCollection, DataGroup
from neuropipe.errors import ConfigError, InvariantViolationError
from neuropipe.morphology import NonBinaryMaskError, holeFill, islandRemoval
from neuropipe.transforms import (
	BadPercentileRangeError,
	ChainError,
	CommandFailedError,
	CommandTimeoutError,
	EmptyMaskError,
	MaskShapeMismatchError,
	OutputMissingError,
	TransformChain,
	TransformKind,
	TransformNode,
	applyMask,
	binarize,
	chainApply,
	chainApplyCollection,
	chainApplyVolume,
	clipPercentiles,
	postprocessChain,
	resample,
	runExternal,
	zeroMeanUnitStd,
)
from neuropipe.volume import AffineVolume


def volume(data: np.ndarray) -> AffineVolume:
	return AffineVolume(np.asarray(data, dtype=np.float32))


class TestNormalization(TestCase):
	def testThreeValues(self) -> None:
		result = zeroMeanUnitStd(volume(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1, 1)))
		np.testing.assert_allclose(result.data.ravel(), [-1.2247, 0.0, 1.2247], atol=1e-4)

	def testConstantVolume(self) -> None:
		result = zeroMeanUnitStd(volume(np.full((3, 3, 3, 1), 5.0)))
		self.assertFalse(result.data.any())

	def testPerChannelStatistics(self) -> None:
		rng = np.random.default_rng(0)
		data = rng.normal([3.0, -7.0], [2.0, 0.5], size=(8, 8, 8, 2))
		result = zeroMeanUnitStd(volume(data)).data.astype(np.float64)
		for channel in range(2):
			self.assertLess(abs(result[..., channel].mean()), 1e-5)
			self.assertLess(abs(result[..., channel].std() - 1.0), 1e-5)

	def testGlobalStatistics(self) -> None:
		data = np.stack([np.zeros((2, 2, 2)), np.full((2, 2, 2), 2.0)], axis=-1)
		result = zeroMeanUnitStd(volume(data), perChannel=False)
		self.assertEqual(float(result.data[..., 0].max()), -1.0)
		self.assertEqual(float(result.data[..., 1].min()), 1.0)

	def testMaskedStatistics(self) -> None:
		data = np.arange(8, dtype=np.float32).reshape(2, 2, 2, 1)
		mask = np.zeros((2, 2, 2, 1))
		mask[0] = 1
		result = zeroMeanUnitStd(volume(data), mask=volume(mask))
		self.assertFalse(result.data[1].any())
		self.assertAlmostEqual(float(result.data[0].mean()), 0.0, places=5)

	def testMaskErrors(self) -> None:
		data = volume(np.ones((2, 2, 2, 1)))
		single = np.zeros((2, 2, 2, 1))
		single[0, 0, 0, 0] = 1
		with self.assertRaises(EmptyMaskError):
			zeroMeanUnitStd(data, mask=volume(single))
		with self.assertRaises(MaskShapeMismatchError):
			zeroMeanUnitStd(data, mask=volume(np.ones((3, 2, 2, 1))))


class TestClipPercentiles(TestCase):
	def testInterpolatedBounds(self) -> None:
		result = clipPercentiles(volume(np.arange(100).reshape(100, 1, 1, 1)), 10, 90)
		self.assertAlmostEqual(float(result.data.min()), 9.9, delta=1e-5)
		self.assertAlmostEqual(float(result.data.max()), 89.1, delta=1e-5)

	def testFullRangeAndConstant(self) -> None:
		rng = np.random.default_rng(1)
		data = volume(rng.standard_normal((4, 4, 4, 2)))
		self.assertTrue(clipPercentiles(data, 0, 100).equals(data))
		flat = volume(np.full((2, 2, 2, 1), 3.0))
		self.assertTrue(clipPercentiles(flat, 1, 99).equals(flat))

	def testBadRange(self) -> None:
		data = volume(np.ones((2, 2, 2, 1)))
		for lo, hi in ((50, 50), (-1, 50), (10, 101), (90, 10), (float("nan"), 10)):
			with self.subTest(lo=lo, hi=hi):
				with self.assertRaises(BadPercentileRangeError):
					clipPercentiles(data, lo, hi)


class TestResample(TestCase):
	def testSameSpacingIsIdentity(self) -> None:
		rng = np.random.default_rng(2)
		data = volume(rng.standard_normal((5, 4, 3, 1)))
		result = resample(data, 1.0)
		self.assertEqual(result.shape, data.shape)
		np.testing.assert_allclose(result.data, data.data, atol=1e-6)

	def testNearestDownsample(self) -> None:
		data = volume(np.arange(64).reshape(4, 4, 4, 1))
		result = resample(data, 2.0, "nearest")
		self.assertEqual(result.shape, (2, 2, 2, 1))
		np.testing.assert_array_equal(result.data, data.data[::2, ::2, ::2])
		self.assertEqual(result.spacing, (2.0, 2.0, 2.0))

	def testTrilinearReproducesRamps(self) -> None:
		x, y, z = np.meshgrid(np.arange(4), np.arange(4), np.arange(4), indexing="ij")
		ramp = volume((2.0 * x + 3.0 * y - z + 1.0)[..., np.newaxis])
		result = resample(ramp, (0.5, 0.5, 0.5))
		self.assertEqual(result.spatialShape, (8, 8, 8))
		u, v, w = np.meshgrid(*(np.arange(8) * 0.5,) * 3, indexing="ij")
		np.testing.assert_allclose(result.data[..., 0], 2.0 * u + 3.0 * v - w + 1.0, atol=1e-5)

	def testWorldExtentIsKept(self) -> None:
		affine = np.diag([1.0, 1.0, 3.0, 1.0])
		data = AffineVolume(np.zeros((6, 6, 4, 1)), affine)
		result = resample(data, (2.0, 1.5, 1.0))
		self.assertEqual(result.spatialShape, (3, 4, 12))
		self.assertEqual(result.spacing, (2.0, 1.5, 1.0))

	def testInvalidArguments(self) -> None:
		data = volume(np.zeros((2, 2, 2, 1)))
		with self.assertRaises(InvariantViolationError):
			resample(data, (1.0, 1.0))
		with self.assertRaises(InvariantViolationError):
			resample(data, 0.0)
		with self.assertRaises(InvariantViolationError):
			resample(data, 1.0, "cubic")


class TestMaskAndBinarize(TestCase):
	def setUp(self) -> None:
		rng = np.random.default_rng(4)
		self.data = volume(rng.standard_normal((4, 4, 4, 2)))
		self.mask = volume((rng.random((4, 4, 4, 1)) > 0.5).astype(np.float32))

	def testApplyMask(self) -> None:
		self.assertTrue(applyMask(self.data, volume(np.ones((4, 4, 4, 1)))).equals(self.data))
		self.assertFalse(applyMask(self.data, volume(np.zeros((4, 4, 4, 1)))).data.any())
		np.testing.assert_array_equal(applyMask(self.data, self.mask).data, self.data.data * self.mask.data)

	def testApplyMaskErrors(self) -> None:
		with self.assertRaises(MaskShapeMismatchError):
			applyMask(self.data, volume(np.ones((4, 4, 3, 1))))
		with self.assertRaises(MaskShapeMismatchError):
			applyMask(self.data, volume(np.ones((4, 4, 4, 3))))
		with self.assertRaises(NonBinaryMaskError):
			applyMask(self.data, self.data.channel(0))

	def testBinarize(self) -> None:
		probabilities = volume(np.array([0.2, 0.5, 0.51]).reshape(3, 1, 1, 1))
		self.assertEqual(binarize(probabilities, 0.5).data.ravel().tolist(), [0.0, 0.0, 1.0])
		self.assertTrue(binarize(self.data, -1e9).data.all())
		expected = (self.data.data > 0.1).astype(np.float32)
		np.testing.assert_array_equal(binarize(self.data, 0.1).data, expected)
		with self.assertRaises(InvariantViolationError):
			binarize(self.data, float("inf"))


@skipIf(shutil.which("cp") is None or shutil.which("sh") is None, "requires a POSIX shell")
class TestExternalCommand(TestCase):
	def setUp(self) -> None:
		self.data = AffineVolume(np.arange(8, dtype=np.float32).reshape(2, 2, 2, 1), meta={"source": "x"})

	def testCopyIsIdentity(self) -> None:
		result = runExternal("cp {input} {output}", self.data)
		self.assertTrue(result.equals(self.data))
		self.assertEqual(result.meta, {"source": "x"})

	def testFailureCapturesStderr(self) -> None:
		with self.assertRaises(CommandFailedError) as context:
			runExternal("sh -c 'echo broken >&2; exit 3' {input} {output}", self.data)
		self.assertEqual(context.exception.exitCode, 3)
		self.assertIn("broken", context.exception.stderrTail)

	def testMissingOutput(self) -> None:
		with self.assertRaises(OutputMissingError):
			runExternal("sh -c 'true' {input} {output}", self.data)

	def testTimeout(self) -> None:
		with self.assertRaises(CommandTimeoutError):
			runExternal("sh -c 'sleep 5' {input} {output}", self.data, timeout=0.2)

	def testMissingProgram(self) -> None:
		with self.assertRaises(CommandFailedError) as context:
			runExternal("no-such-program-for-neuropipe {input} {output}", self.data)
		self.assertEqual(context.exception.exitCode, 127)

	def testTemplateNeedsPlaceholders(self) -> None:
		with self.assertRaises(InvariantViolationError):
			runExternal("cp {input} out.nii", self.data)


class TestTransformNode(TestCase):
	def testDefaultsAndRoundTrip(self) -> None:
		node = TransformNode.fromDict({"kind": "island_removal", "name": "islands"})
		self.assertIs(node.kind, TransformKind.ISLAND_REMOVAL)
		self.assertEqual(node.params["min_voxels"], 10)
		self.assertEqual(node.toDict(), {"kind": "island_removal", "params": {}, "name": "islands"})
		clip = TransformNode.fromDict({"kind": "clip_percentiles", "params": {"lo": 1, "hi": 99}})
		self.assertEqual(TransformNode.fromDict(clip.toDict()), clip)

	def testInvalidNodes(self) -> None:
		cases = (
			({"kind": "sharpen"}, "kind"),
			({"kind": "binarize", "params": {"threshold": "high"}}, "params.threshold"),
			({"kind": "binarize", "params": {"level": 1}}, "params.level"),
			({"kind": "clip_percentiles", "params": {"lo": 1}}, "params.hi"),
			({"kind": "island_removal", "params": {"min_voxels": 0}}, "params.min_voxels"),
			({"kind": "hole_fill", "params": {"connectivity": 5}}, "params.connectivity"),
			({"kind": "resample", "params": {"spacing": [1, -1, 1]}}, "params.spacing"),
			({"kind": "external_command", "params": {"command": "cp a b"}}, "params.command"),
			({"kind": "apply_mask"}, "params.mask_group"),
			({"kind": "binarize", "colour": "red"}, "colour"),
		)
		for data, field in cases:
			with self.subTest(data=data):
				with self.assertRaises(ConfigError) as context:
					TransformNode.fromDict(data)
				self.assertEqual(context.exception.field, field)

	def testMaskGroupLookup(self) -> None:
		node = TransformNode(TransformKind.APPLY_MASK, {"mask_group": "brain"})
		data = volume(np.ones((2, 2, 2, 1)))
		with self.assertRaises(ConfigError):
			node.apply(data)
		self.assertTrue(node.apply(data, related={"brain": data}).equals(data))

	def testLabelsResampleWithNearest(self) -> None:
		node = TransformNode(TransformKind.RESAMPLE, {"spacing": 0.5})
		labels = volume(np.array([0.0, 1.0]).reshape(2, 1, 1, 1))
		self.assertEqual(
			sorted(set(node.apply(labels, group=LABEL_GROUP).data.ravel().tolist())), [0.0, 1.0]
		)
		self.assertIn(0.5, node.apply(labels, group=INPUT_GROUP).data.ravel().tolist())


class TestTransformChain(TestCase):
	def setUp(self) -> None:
		rng = np.random.default_rng(6)
		self.data = volume(rng.gamma(2.0, 2.0, size=(6, 6, 6, 2)))

	def testEmptyChainIsIdentity(self) -> None:
		self.assertTrue(chainApplyVolume(TransformChain(), self.data).equals(self.data))

	def testComposition(self) -> None:
		chain = TransformChain.fromJson(
			'[{"kind": "clip_percentiles", "params": {"lo": 1, "hi": 99}}, {"kind": "zero_mean_unit_std"}]'
		)
		expected = zeroMeanUnitStd(clipPercentiles(self.data, 1, 99))
		self.assertTrue(chainApplyVolume(chain, self.data).equals(expected))
		self.assertEqual(TransformChain.fromSpec(chain.toSpec()), chain)

	def testPostprocessComposition(self) -> None:
		chain = postprocessChain(
			[{"kind": "binarize"}, {"kind": "island_removal"}, {"kind": "hole_fill"}]
		)
		rng = np.random.default_rng(7)
		prediction = volume(rng.random((12, 12, 12, 1)))
		expected = holeFill(islandRemoval(binarize(prediction, 0.5), 10))
		self.assertTrue(chainApplyVolume(chain, prediction).equals(expected))

	def testGroupSelectivity(self) -> None:
		chain = TransformChain.fromSpec(
			[{"kind": "binarize", "applies_to": [INPUT_GROUP]}], defaultGroups=(PREDICTION_GROUP,)
		)
		self.assertTrue(chainApplyVolume(chain, self.data).equals(self.data))
		self.assertFalse(chainApplyVolume(chain, self.data, group=INPUT_GROUP).equals(self.data))

	def testWithout(self) -> None:
		chain = TransformChain.fromSpec(
			[
				{"kind": "clip_percentiles", "params": {"lo": 1, "hi": 99}, "name": "clip"},
				{"kind": "zero_mean_unit_std", "name": "normalization"},
			]
		)
		with self.assertLogs("neuropipe.transforms", level="WARNING") as logs:
			reduced = chain.without(["normalization"])
		self.assertEqual([node.name for node in reduced], ["clip"])
		self.assertIn("normalization", logs.output[0])
		with self.assertRaises(ConfigError):
			chain.without(["denoise"])

	def testFieldsAreIndexed(self) -> None:
		with self.assertRaises(ConfigError) as context:
			TransformChain.fromSpec([{"kind": "binarize"}, {"kind": "binarize", "params": {"level": 1}}])
		self.assertTrue(context.exception.field.startswith("[1]"))
		with self.assertRaises(ConfigError):
			TransformChain.fromJson('{"kind": "binarize"}')
		with self.assertRaises(ConfigError):
			TransformChain.fromJson("[")

	def testFailingNodeIsReported(self) -> None:
		chain = TransformChain.fromSpec([{"kind": "binarize"}, {"kind": "hole_fill"}, {"kind": "hole_fill"}])
		with patch("neuropipe.transforms.holeFill", side_effect=[self.data, NonBinaryMaskError("bad")]):
			with self.assertRaises(ChainError) as context:
				chainApplyVolume(chain, self.data)
		self.assertEqual(context.exception.nodeIndex, 2)
		self.assertEqual(context.exception.kind, "hole_fill")

	def testCollection(self) -> None:
		groups = [DataGroup(INPUT_GROUP, ("a", "b")), DataGroup(LABEL_GROUP, ("mask",))]
		label = volume(np.ones((6, 6, 6, 1)))
		collection = DataCollection.fromStackedVolumes(
			groups, {"one": {INPUT_GROUP: self.data, LABEL_GROUP: label}, "two": {INPUT_GROUP: self.data}}
		)
		chain = TransformChain.fromSpec([{"kind": "zero_mean_unit_std"}])
		for workers in (1, 3):
			with self.subTest(workers=workers):
				result = chainApplyCollection(chain, collection, workers=workers)
				self.assertEqual(result.caseIds, ("one", "two"))
				self.assertTrue(result.caseVolume("one", INPUT_GROUP).equals(zeroMeanUnitStd(self.data)))
				self.assertTrue(result.caseVolume("one", LABEL_GROUP).equals(label))
		self.assertIsInstance(chainApply(chain, collection), DataCollection)
		self.assertIsInstance(chainApply(chain, self.data), AffineVolume)

	def testCollectionErrorNamesCase(self) -> None:
		groups = [DataGroup(INPUT_GROUP, ("a",))]
		collection = DataCollection.fromStackedVolumes(groups, {"bad": {INPUT_GROUP: self.data.channel(0)}})
		with self.assertRaises(ChainError) as context:
			chainApplyCollection(TransformChain.fromSpec([{"kind": "hole_fill"}]), collection)
		self.assertEqual(context.exception.caseId, "bad")
