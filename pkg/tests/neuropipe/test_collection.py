# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.


# Future Modules:
from __future__ import annotations

# Built-in Modules:
import tempfile
import threading
from pathlib import Path
from typing import Any
from unittest import TestCase
from unittest.mock import Mock

# Third-party Modules:
import numpy as np

# NeuroPipe Modules:
from neuropipe.collection import (
	INPUT_GROUP,
	LABEL_GROUP,
	AmbiguousPatternError,
	BadHeaderError,
	Case,
	DataCollection,
	DataGroup,
	EmptyCollectionError,
	EmptyRootError,
	MissingChannelError,
	MissingPathError,
	SamplingMode,
	UnknownCaseError,
	UnknownGroupError,
	collectionFromCsv,
	collectionFromDirectory,
	drawBatchIndices,
	sampleBatch,
)
from neuropipe.errors import InvariantViolationError, ShapeMismatchError
from neuropipe.nifti import readNifti, writeNifti
from neuropipe.volume import AffineVolume


def constant(value: float, shape: tuple[int, ...] = (16, 16, 8)) -> AffineVolume:
	return AffineVolume(np.full((*shape, 1), value, dtype=np.float32))


class TestDataGroup(TestCase):
	def testChannels(self) -> None:
		self.assertEqual(DataGroup(INPUT_GROUP, ("FLAIR", "T1POST")).channels, 2)

	def testInvalidGroups(self) -> None:
		with self.assertRaises(InvariantViolationError):
			DataGroup("", ("FLAIR",))
		with self.assertRaises(InvariantViolationError):
			DataGroup(INPUT_GROUP, ())
		with self.assertRaises(InvariantViolationError):
			DataGroup(INPUT_GROUP, ("FLAIR", "FLAIR"))


class TestDirectoryCollection(TestCase):
	def setUp(self) -> None:
		self.directory = tempfile.TemporaryDirectory()
		self.root = Path(self.directory.name)
		for index, caseId in enumerate(("p01", "p02")):
			caseDirectory: Path = self.root / caseId
			caseDirectory.mkdir()
			writeNifti(constant(index + 1.0), caseDirectory / "FLAIR.nii.gz", gzip=True)
			writeNifti(constant(index + 10.0), caseDirectory / "T1POST.nii.gz", gzip=True)
			writeNifti(constant(float(index % 2)), caseDirectory / "mask.nii.gz", gzip=True)
		self.patterns = {INPUT_GROUP: ["FLAIR*", "T1POST*"], LABEL_GROUP: ["mask*"]}

	def tearDown(self) -> None:
		self.directory.cleanup()

	def testEnumeratesWithoutLoading(self) -> None:
		loader = Mock(wraps=readNifti)
		collection: DataCollection = collectionFromDirectory(self.root, self.patterns, loader=loader)
		self.assertEqual(collection.caseIds, ("p01", "p02"))
		self.assertEqual(collection.groupNames, (INPUT_GROUP, LABEL_GROUP))
		self.assertEqual(collection.group(INPUT_GROUP).channelLabels, ("FLAIR", "T1POST"))
		loader.assert_not_called()
		self.assertFalse(collection.isCached("p01", INPUT_GROUP))

	def testCaseTensorStacksChannels(self) -> None:
		collection: DataCollection = collectionFromDirectory(self.root, self.patterns)
		tensor = collection.caseTensor("p02", INPUT_GROUP)
		self.assertEqual(tensor.shape, (16, 16, 8, 2))
		self.assertEqual(float(tensor[..., 0].max()), 2.0)
		self.assertEqual(float(tensor[..., 1].max()), 11.0)

	def testCacheSurvivesDeletedFiles(self) -> None:
		collection: DataCollection = collectionFromDirectory(self.root, self.patterns)
		first = collection.caseTensor("p01", INPUT_GROUP)
		self.assertTrue(collection.isCached("p01", INPUT_GROUP))
		(self.root / "p01" / "FLAIR.nii.gz").unlink()
		second = collection.caseTensor("p01", INPUT_GROUP)
		np.testing.assert_array_equal(first, second)

	def testChannelLabelsOverride(self) -> None:
		collection: DataCollection = collectionFromDirectory(
			self.root, self.patterns, channelLabels={INPUT_GROUP: ["flair", "t1post"]}
		)
		self.assertEqual(collection.group(INPUT_GROUP).channelLabels, ("flair", "t1post"))
		self.assertEqual(collection.group(LABEL_GROUP).channelLabels, ("mask",))

	def testMissingChannel(self) -> None:
		(self.root / "p02" / "T1POST.nii.gz").unlink()
		with self.assertRaises(MissingChannelError) as context:
			collectionFromDirectory(self.root, self.patterns)
		error: MissingChannelError = context.exception
		self.assertEqual((error.caseId, error.group, error.pattern), ("p02", INPUT_GROUP, "T1POST*"))

	def testAmbiguousPattern(self) -> None:
		writeNifti(constant(0.0), self.root / "p02" / "FLAIR_2.nii.gz")
		with self.assertRaises(AmbiguousPatternError) as context:
			collectionFromDirectory(self.root, self.patterns)
		self.assertEqual(context.exception.caseId, "p02")
		self.assertEqual(len(context.exception.matches), 2)

	def testEmptyRoot(self) -> None:
		with tempfile.TemporaryDirectory() as empty:
			with self.assertRaises(EmptyRootError):
				collectionFromDirectory(empty, self.patterns)
		with self.assertRaises(EmptyRootError):
			collectionFromDirectory(self.root / "p01" / "FLAIR.nii.gz", self.patterns)

	def testShapeMismatch(self) -> None:
		writeNifti(constant(1.0, (16, 16, 9)), self.root / "p01" / "T1POST.nii.gz", gzip=True)
		collection: DataCollection = collectionFromDirectory(self.root, self.patterns)
		with self.assertRaises(ShapeMismatchError):
			collection.caseTensor("p01", INPUT_GROUP)

	def testCsvMatchesDirectory(self) -> None:
		lines: list[str] = ["case,input_data:FLAIR,input_data:T1POST,ground_truth:mask"]
		for caseId in ("p02", "p01"):
			lines.append(f"{caseId},{caseId}/FLAIR.nii.gz,{caseId}/T1POST.nii.gz,{caseId}/mask.nii.gz")
		csvPath: Path = self.root / "cases.csv"
		csvPath.write_text("\n".join(lines) + "\n", encoding="utf-8")
		fromCsv: DataCollection = collectionFromCsv(csvPath)
		fromDirectory: DataCollection = collectionFromDirectory(self.root, self.patterns)
		self.assertEqual(fromCsv.caseIds, fromDirectory.caseIds)
		self.assertEqual(fromCsv.groups, fromDirectory.groups)
		for caseId in fromCsv:
			self.assertEqual(fromCsv.case(caseId).sources, fromDirectory.case(caseId).sources)

	def testAttributes(self) -> None:
		collection: DataCollection = collectionFromDirectory(self.root, self.patterns)
		attributes = collection.attributes(INPUT_GROUP)
		self.assertEqual(attributes.shape, (16, 16, 8, 2))
		self.assertEqual(attributes.dimension, 3)
		self.assertEqual(attributes.intensityRange, (1.0, 11.0))
		self.assertIs(collection.attributes(INPUT_GROUP), attributes)


class TestCsvCollection(TestCase):
	def setUp(self) -> None:
		self.directory = tempfile.TemporaryDirectory()
		self.root = Path(self.directory.name)

	def tearDown(self) -> None:
		self.directory.cleanup()

	def load(self, text: str) -> DataCollection:
		path: Path = self.root / "cases.csv"
		path.write_text(text, encoding="utf-8")
		return collectionFromCsv(path)

	def testEnumeration(self) -> None:
		collection: DataCollection = self.load(
			"case,input_data:FLAIR,input_data:T1POST,ground_truth:mask\n"
			+ "c,c_f.nii,c_t.nii,c_m.nii\n"
			+ "a,a_f.nii,a_t.nii,a_m.nii\n"
			+ "\n"
			+ "b,b_f.nii,b_t.nii,b_m.nii\n"
		)
		self.assertEqual(collection.caseIds, ("a", "b", "c"))
		self.assertEqual(len(collection.groups), 2)
		self.assertEqual(collection.case("a").sources[INPUT_GROUP][1], (self.root / "a_t.nii").resolve())

	def testMissingPath(self) -> None:
		with self.assertRaises(MissingPathError) as context:
			self.load("case,input_data:FLAIR,ground_truth:mask\na,a_f.nii,\n")
		self.assertEqual(context.exception.row, 2)
		self.assertEqual(context.exception.column, "ground_truth:mask")

	def testBadHeaders(self) -> None:
		for text in ("", "id,input_data:FLAIR\n", "case\n", "case,FLAIR\n", "case,a:x,a:x\n"):
			with self.subTest(text=text):
				with self.assertRaises(BadHeaderError):
					self.load(text)

	def testTooManyCells(self) -> None:
		with self.assertRaises(BadHeaderError):
			self.load("case,input_data:FLAIR\na,a.nii,extra.nii\n")


class TestInMemoryCollection(TestCase):
	def setUp(self) -> None:
		self.groups = [DataGroup(INPUT_GROUP, ("image",)), DataGroup(LABEL_GROUP, ("mask",))]
		self.collection = DataCollection.fromVolumes(
			self.groups,
			{
				"a": {INPUT_GROUP: [constant(0.0, (2, 2, 2))], LABEL_GROUP: [constant(10.0, (2, 2, 2))]},
				"b": {INPUT_GROUP: [constant(1.0, (2, 2, 2))], LABEL_GROUP: [constant(11.0, (2, 2, 2))]},
			},
		)

	def testLookups(self) -> None:
		self.assertIn("a", self.collection)
		self.assertEqual(list(self.collection), ["a", "b"])
		with self.assertRaises(UnknownCaseError):
			self.collection.case("missing")
		with self.assertRaises(UnknownGroupError):
			self.collection.group("missing")

	def testInconsistentCases(self) -> None:
		with self.assertRaises(InvariantViolationError):
			DataCollection(self.groups, [Case("a", {}), Case("a", {})])
		with self.assertRaises(InvariantViolationError):
			DataCollection(self.groups, [Case("a", {"unknown": (constant(0.0),)})])
		with self.assertRaises(InvariantViolationError):
			DataCollection(self.groups, [Case("a", {INPUT_GROUP: (constant(0.0), constant(1.0))})])
		with self.assertRaises(InvariantViolationError):
			DataCollection(self.groups, [], maxCachedCases=0)

	def testSubsetKeepsOrder(self) -> None:
		subset: DataCollection = self.collection.subset(["b", "a"])
		self.assertEqual(subset.caseIds, ("b", "a"))
		self.assertEqual(float(subset.caseTensor("b", INPUT_GROUP).max()), 1.0)

	def testFromStackedVolumes(self) -> None:
		stacked = AffineVolume(np.stack([np.zeros((2, 2, 2)), np.ones((2, 2, 2))], axis=-1))
		collection = DataCollection.fromStackedVolumes(
			[DataGroup(INPUT_GROUP, ("x", "y"))], {"a": {INPUT_GROUP: stacked}}
		)
		np.testing.assert_array_equal(collection.caseTensor("a", INPUT_GROUP), stacked.data)

	def testLeastRecentlyUsedEviction(self) -> None:
		loader = Mock(side_effect=lambda path: constant(float(len(str(path))), (2, 2, 2)))
		cases = [Case(name, {INPUT_GROUP: (Path(name),)}) for name in ("a", "bb", "ccc")]
		collection = DataCollection(self.groups[:1], cases, maxCachedCases=2, loader=loader)
		for caseId in ("a", "bb", "a", "ccc"):
			collection.caseTensor(caseId, INPUT_GROUP)
		self.assertTrue(collection.isCached("a", INPUT_GROUP))
		self.assertFalse(collection.isCached("bb", INPUT_GROUP))
		self.assertTrue(collection.isCached("ccc", INPUT_GROUP))
		self.assertEqual(loader.call_count, 3)

	def testConcurrentLoadsShareOneRead(self) -> None:
		started = threading.Event()
		release = threading.Event()

		def slowLoader(path: Any) -> AffineVolume:
			started.set()
			release.wait(5)
			return constant(3.0, (2, 2, 2))

		loader = Mock(side_effect=slowLoader)
		collection = DataCollection(self.groups[:1], [Case("a", {INPUT_GROUP: (Path("a"),)})], loader=loader)
		results: list[AffineVolume] = []
		threads = [
			threading.Thread(target=lambda: results.append(collection.caseVolume("a", INPUT_GROUP)))
			for _ in range(4)
		]
		for thread in threads:
			thread.start()
		started.wait(5)
		release.set()
		for thread in threads:
			thread.join(5)
		self.assertEqual(loader.call_count, 1)
		self.assertEqual(len(results), 4)
		self.assertTrue(all(result is results[0] for result in results))


class TestSampling(TestCase):
	def setUp(self) -> None:
		groups = [DataGroup(INPUT_GROUP, ("image",)), DataGroup(LABEL_GROUP, ("mask",))]
		self.collection = DataCollection.fromVolumes(
			groups,
			{
				caseId: {
					INPUT_GROUP: [constant(float(index), (2, 2, 2))],
					LABEL_GROUP: [constant(float(index) + 100.0, (2, 2, 2))],
				}
				for index, caseId in enumerate(("a", "b"))
			},
		)

	def testPairedIsDeterministic(self) -> None:
		first = sampleBatch(self.collection, 4, SamplingMode.PAIRED, 7)
		second = sampleBatch(self.collection, 4, "paired", 7)
		for name in (INPUT_GROUP, LABEL_GROUP):
			np.testing.assert_array_equal(first[name], second[name])
		self.assertEqual(first[INPUT_GROUP].shape, (4, 2, 2, 2, 1))
		# Paired slots share a case: the label is always the input plus 100.
		np.testing.assert_array_equal(first[LABEL_GROUP], first[INPUT_GROUP] + 100.0)

	def testPairedIndicesInRange(self) -> None:
		indices = drawBatchIndices(2, 4, SamplingMode.PAIRED, (INPUT_GROUP, LABEL_GROUP), 3)
		self.assertTrue(set(indices[INPUT_GROUP].tolist()) <= {0, 1})
		np.testing.assert_array_equal(indices[INPUT_GROUP], indices[LABEL_GROUP])

	def testUnpairedMarginalsAreUniform(self) -> None:
		draws: int = 10000
		indices = drawBatchIndices(2, draws, SamplingMode.UNPAIRED, (INPUT_GROUP, LABEL_GROUP), 11)
		sigma: float = float(np.sqrt(draws * 0.5 * 0.5))
		for name in (INPUT_GROUP, LABEL_GROUP):
			ones: int = int(indices[name].sum())
			self.assertLess(abs(ones - draws / 2), 3 * sigma)
		self.assertFalse(np.array_equal(indices[INPUT_GROUP], indices[LABEL_GROUP]))

	def testSelectedGroups(self) -> None:
		batch = sampleBatch(self.collection, 2, SamplingMode.UNPAIRED, 0, groupNames=[LABEL_GROUP])
		self.assertEqual(list(batch), [LABEL_GROUP])

	def testEmptyCollection(self) -> None:
		with self.assertRaises(EmptyCollectionError):
			drawBatchIndices(0, 4, SamplingMode.PAIRED, (INPUT_GROUP,), 0)
		with self.assertRaises(InvariantViolationError):
			drawBatchIndices(2, 0, SamplingMode.PAIRED, (INPUT_GROUP,), 0)

	def testDifferingShapes(self) -> None:
		collection = DataCollection.fromVolumes(
			[DataGroup(INPUT_GROUP, ("image",))],
			{"a": {INPUT_GROUP: [constant(0.0, (2, 2, 2))]}, "b": {INPUT_GROUP: [constant(0.0, (3, 2, 2))]}},
		)
		with self.assertRaises(ShapeMismatchError):
			sampleBatch(collection, 32, SamplingMode.PAIRED, 0)
