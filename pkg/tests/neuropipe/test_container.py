# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.


# Future Modules:
from __future__ import annotations

# Built-in Modules:
import tempfile
from pathlib import Path
from unittest import TestCase
from unittest.mock import patch

# Third-party Modules:
import numpy as np

# NeuroPipe Modules:
from neuropipe.container import ALIGNMENT, PREAMBLE, ContainerReader, ContainerWriter, alignUp
from neuropipe.errors import (
	BadMagicError,
	ChecksumMismatchError,
	ContainerError,
	TruncatedFileError,
	VersionUnsupportedError,
)


MAGIC: bytes = b"TEST"


class TestContainer(TestCase):
	def setUp(self) -> None:
		self.writer = ContainerWriter(MAGIC, 1)
		self.first = np.arange(6, dtype=np.float32).reshape(2, 3)
		self.second = np.array([1, 2, 3], dtype=np.int64)
		self.manifest = {"first": self.writer.addBlob(self.first), "second": self.writer.addBlob(self.second)}
		self.data: bytes = self.writer.toBytes(self.manifest)

	def testAlignUp(self) -> None:
		self.assertEqual(alignUp(0), 0)
		self.assertEqual(alignUp(1), ALIGNMENT)
		self.assertEqual(alignUp(ALIGNMENT), ALIGNMENT)
		self.assertEqual(alignUp(65, 8), 72)

	def testBlobsAreAligned(self) -> None:
		self.assertEqual(self.manifest["first"]["offset"], 0)
		self.assertEqual(self.manifest["second"]["offset"], ALIGNMENT)
		self.assertEqual(self.manifest["second"]["dtype"], "<i8")
		self.assertEqual(self.manifest["first"]["shape"], [2, 3])

	def testRoundTrip(self) -> None:
		reader = ContainerReader(self.data, MAGIC, (1,))
		self.assertEqual(reader.version, 1)
		np.testing.assert_array_equal(reader.blob(reader.manifest["first"], "first"), self.first)
		np.testing.assert_array_equal(reader.blob(reader.manifest["second"], "second"), self.second)
		self.assertTrue(reader.blob(reader.manifest["first"], "first").flags.writeable)

	def testWriteIsAtomic(self) -> None:
		with tempfile.TemporaryDirectory() as directory:
			path = Path(directory) / "nested" / "blobs.bin"
			self.writer.write(path, self.manifest)
			self.assertEqual(path.read_bytes(), self.data)
			self.assertEqual(sorted(item.name for item in path.parent.iterdir()), ["blobs.bin"])
			reader = ContainerReader.fromFile(path, MAGIC, (1,))
			self.assertEqual(set(reader.manifest), {"first", "second"})

	def testFailedWriteLeavesNothing(self) -> None:
		with tempfile.TemporaryDirectory() as directory:
			path = Path(directory) / "blobs.bin"
			with patch("neuropipe.container.os.replace", side_effect=OSError("disk full")):
				with self.assertRaises(OSError):
					self.writer.write(path, self.manifest)
			self.assertEqual(list(Path(directory).iterdir()), [])

	def testBadMagic(self) -> None:
		with self.assertRaises(BadMagicError):
			ContainerReader(self.data, b"NOPE", (1,))
		with self.assertRaises(BadMagicError):
			ContainerReader(b"XY", MAGIC, (1,))

	def testUnsupportedVersion(self) -> None:
		with self.assertRaises(VersionUnsupportedError):
			ContainerReader(self.data, MAGIC, (2,))

	def testTruncation(self) -> None:
		with self.assertRaises(TruncatedFileError):
			ContainerReader(self.data[:8], MAGIC, (1,))
		with self.assertRaises(TruncatedFileError):
			ContainerReader(self.data[: PREAMBLE.size + 4], MAGIC, (1,))
		reader = ContainerReader(self.data[:-4], MAGIC, (1,))
		with self.assertRaises(TruncatedFileError):
			reader.blob(reader.manifest["second"], "second")

	def testFlippedPayloadByte(self) -> None:
		corrupted = bytearray(self.data)
		corrupted[-1] ^= 0xFF
		reader = ContainerReader(bytes(corrupted), MAGIC, (1,))
		with self.assertRaises(ChecksumMismatchError):
			reader.blob(reader.manifest["second"], "second")

	def testCorruptManifest(self) -> None:
		corrupted = bytearray(self.data)
		corrupted[PREAMBLE.size] = ord("[")
		with self.assertRaises(ContainerError):
			ContainerReader(bytes(corrupted), MAGIC, (1,))

	def testMalformedReference(self) -> None:
		reader = ContainerReader(self.data, MAGIC, (1,))
		with self.assertRaises(ContainerError):
			reader.blob({"offset": 0}, "broken")
		bad = dict(reader.manifest["first"], shape=[4, 4])
		with self.assertRaises(ContainerError):
			reader.blob(bad, "first")

	def testUnsupportedDtype(self) -> None:
		with self.assertRaises(ValueError):
			self.writer.addBlob(np.zeros(2, dtype=np.complex64))
		with self.assertRaises(ValueError):
			ContainerWriter(b"TOOLONG", 1)
