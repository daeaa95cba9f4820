# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.


# Future Modules:
from __future__ import annotations

# Built-in Modules:
import gzip
import tempfile
from pathlib import Path
from unittest import TestCase
from unittest.mock import patch

# Third-party Modules:
import numpy as np

# NeuroPipe Modules:
from neuropipe.errors import InvariantViolationError, NeuroPipeError
from neuropipe.nifti import (
	HEADER_SIZE,
	SUPPORTED_DATATYPES,
	VOX_OFFSET,
	MalformedHeaderError,
	NiftiHeader,
	NiftiIOError,
	TruncatedPayloadError,
	UnsupportedDatatypeError,
	readNifti,
	readNiftiHeader,
	volumeFromBytes,
	volumeToBytes,
	writeNifti,
)
from neuropipe.volume import AffineVolume


def encode(header: NiftiHeader, payload: bytes) -> bytes:
	return header.toBytes() + bytes(VOX_OFFSET - HEADER_SIZE) + payload


class TestNiftiHeader(TestCase):
	def testFloat32Volume(self) -> None:
		header = NiftiHeader(dim=(3, 4, 4, 4, 1, 1, 1, 1))
		payload: bytes = np.arange(64, dtype="<f4").tobytes()
		volume = volumeFromBytes(encode(header, payload))
		self.assertEqual(volume.shape, (4, 4, 4, 1))
		# Column-major: the first axis varies fastest.
		self.assertEqual(float(volume.data[1, 0, 0, 0]), 1.0)
		self.assertEqual(float(volume.data[0, 1, 0, 0]), 4.0)
		self.assertEqual(float(volume.data[0, 0, 1, 0]), 16.0)

	def testScaling(self) -> None:
		header = NiftiHeader(dim=(3, 1, 1, 1, 1, 1, 1, 1), sclSlope=2.0, sclInter=1.0)
		volume = volumeFromBytes(encode(header, np.array([3.0], dtype="<f4").tobytes()))
		self.assertEqual(float(volume.data[0, 0, 0, 0]), 7.0)

	def testZeroSlopeMeansNoScaling(self) -> None:
		header = NiftiHeader(dim=(3, 1, 1, 1, 1, 1, 1, 1), sclSlope=0.0, sclInter=5.0)
		volume = volumeFromBytes(encode(header, np.array([3.0], dtype="<f4").tobytes()))
		self.assertEqual(float(volume.data[0, 0, 0, 0]), 3.0)

	def testIntegerDatatypes(self) -> None:
		for datatype, bitpix, dtype in ((2, 8, "|u1"), (4, 16, "<i2"), (8, 32, "<i4"), (64, 64, "<f8")):
			with self.subTest(datatype=datatype):
				header = NiftiHeader(dim=(3, 2, 1, 1, 1, 1, 1, 1), datatype=datatype, bitpix=bitpix)
				volume = volumeFromBytes(encode(header, np.array([7, 9], dtype=dtype).tobytes()))
				self.assertEqual(volume.data.dtype, np.float32)
				self.assertEqual(volume.data[:, 0, 0, 0].tolist(), [7.0, 9.0])

	def testBigEndianDetection(self) -> None:
		header = NiftiHeader(dim=(3, 2, 2, 1, 1, 1, 1, 1), byteOrder=">")
		payload: bytes = np.array([1.0, 2.0, 3.0, 4.0], dtype=">f4").tobytes()
		raw: bytes = encode(header, payload)
		self.assertEqual(NiftiHeader.fromBytes(raw).byteOrder, ">")
		volume = volumeFromBytes(raw)
		self.assertEqual(volume.data[:, :, 0, 0].tolist(), [[1.0, 3.0], [2.0, 4.0]])

	def testFourDimensionalChannels(self) -> None:
		header = NiftiHeader(dim=(4, 2, 2, 2, 3, 1, 1, 1))
		volume = volumeFromBytes(encode(header, np.arange(24, dtype="<f4").tobytes()))
		self.assertEqual(volume.shape, (2, 2, 2, 3))
		self.assertEqual(float(volume.data[0, 0, 0, 1]), 8.0)

	def testAffineFromSform(self) -> None:
		header = NiftiHeader(
			dim=(3, 1, 1, 1, 1, 1, 1, 1),
			sformCode=1,
			qformCode=1,
			srowX=(2.0, 0.0, 0.0, -10.0),
			srowY=(0.0, 3.0, 0.0, 5.0),
			srowZ=(0.0, 0.0, 4.0, 1.0),
		)
		np.testing.assert_array_equal(
			header.affine(), [[2, 0, 0, -10], [0, 3, 0, 5], [0, 0, 4, 1], [0, 0, 0, 1]]
		)

	def testAffineFromIdentityQuaternion(self) -> None:
		header = NiftiHeader(
			dim=(3, 1, 1, 1, 1, 1, 1, 1),
			pixdim=(-1.0, 2.0, 2.0, 3.0, 1.0, 1.0, 1.0, 1.0),
			qformCode=1,
			qoffsetX=1.0,
			qoffsetY=2.0,
			qoffsetZ=3.0,
		)
		np.testing.assert_allclose(header.affine(), [[2, 0, 0, 1], [0, 2, 0, 2], [0, 0, -3, 3], [0, 0, 0, 1]])

	def testAffineFromPixdim(self) -> None:
		header = NiftiHeader(dim=(3, 1, 1, 1, 1, 1, 1, 1), pixdim=(1.0, 0.5, 0.0, 2.0, 1.0, 1.0, 1.0, 1.0))
		np.testing.assert_array_equal(np.diag(header.affine()), [0.5, 1.0, 2.0, 1.0])

	def testMalformedHeaders(self) -> None:
		good: bytes = NiftiHeader(dim=(3, 1, 1, 1, 1, 1, 1, 1)).toBytes()
		with self.assertRaises(MalformedHeaderError):
			NiftiHeader.fromBytes(good[:100])
		with self.assertRaises(MalformedHeaderError):
			NiftiHeader.fromBytes(good[:344] + b"ni1\x00")
		with self.assertRaises(MalformedHeaderError):
			NiftiHeader.fromBytes(good[:344] + b"abcd")
		with self.assertRaises(MalformedHeaderError):
			NiftiHeader.fromBytes((349).to_bytes(4, "little") + good[4:])
		with self.assertRaises(MalformedHeaderError):
			NiftiHeader.fromBytes(NiftiHeader(dim=(3, 1, 0, 1, 1, 1, 1, 1)).toBytes())
		with self.assertRaises(MalformedHeaderError):
			NiftiHeader.fromBytes(NiftiHeader(dim=(3, 1, 1, 1, 1, 1, 1, 1), bitpix=16).toBytes())

	def testUnsupportedDatatype(self) -> None:
		raw: bytes = NiftiHeader(dim=(3, 1, 1, 1, 1, 1, 1, 1), datatype=32, bitpix=64).toBytes()
		with self.assertRaises(UnsupportedDatatypeError) as context:
			NiftiHeader.fromBytes(raw)
		self.assertEqual(context.exception.datatype, 32)

	def testTruncatedPayload(self) -> None:
		header = NiftiHeader(dim=(3, 4, 4, 4, 1, 1, 1, 1))
		with self.assertRaises(TruncatedPayloadError):
			volumeFromBytes(encode(header, bytes(10)))


class TestNiftiFiles(TestCase):
	def setUp(self) -> None:
		self.directory = tempfile.TemporaryDirectory()
		self.root = Path(self.directory.name)
		rng = np.random.default_rng(3)
		affine = np.array(
			[[0.9, 0.1, 0.0, -20.5], [0.0, 1.1, 0.2, 10.25], [0.0, 0.0, 2.5, 3.0], [0.0, 0.0, 0.0, 1.0]]
		)
		self.volume = AffineVolume(
			rng.standard_normal((8, 8, 8, 2)).astype(np.float32), affine, {"description": "random"}
		)

	def tearDown(self) -> None:
		self.directory.cleanup()

	def assertSameVolume(self, first: AffineVolume, second: AffineVolume) -> None:
		self.assertEqual(first.shape, second.shape)
		self.assertEqual(first.data.tobytes(), second.data.tobytes())
		np.testing.assert_allclose(first.affine, second.affine, rtol=0.0, atol=1e-6)

	def testWriteStartsWithHeaderSize(self) -> None:
		raw: bytes = volumeToBytes(self.volume)
		self.assertEqual(int.from_bytes(raw[:4], "little"), HEADER_SIZE)
		self.assertEqual(raw[344:348], b"n+1\x00")
		self.assertEqual(len(raw), VOX_OFFSET + 8 * 8 * 8 * 2 * 4)

	def testRoundTrip(self) -> None:
		for name, compress in (("plain.nii", False), ("compressed.nii.gz", True)):
			with self.subTest(name=name):
				path: Path = self.root / name
				writeNifti(self.volume, path, gzip=compress)
				loaded: AffineVolume = readNifti(path)
				self.assertSameVolume(loaded, self.volume)
				self.assertEqual(loaded.meta["description"], "random")
				self.assertEqual(loaded.meta["source"], str(path))

	def testBigEndianRoundTrip(self) -> None:
		path: Path = self.root / "big.nii"
		writeNifti(self.volume, path, byteOrder=">")
		self.assertEqual(readNiftiHeader(path).byteOrder, ">")
		self.assertSameVolume(readNifti(path), self.volume)

	def testTwoDimensionalRoundTrip(self) -> None:
		path: Path = self.root / "slice.nii"
		volume = AffineVolume(np.arange(12, dtype=np.float32).reshape(3, 4, 1))
		writeNifti(volume, path)
		self.assertEqual(readNiftiHeader(path).ndim, 2)
		self.assertSameVolume(readNifti(path), volume)

	def testGzipDetectedFromContent(self) -> None:
		path: Path = self.root / "disguised.nii"
		path.write_bytes(gzip.compress(volumeToBytes(self.volume)))
		self.assertSameVolume(readNifti(path), self.volume)

	def testCompressedWritesAreReproducible(self) -> None:
		writeNifti(self.volume, self.root / "a.nii.gz", gzip=True)
		writeNifti(self.volume, self.root / "b.nii.gz", gzip=True)
		self.assertEqual((self.root / "a.nii.gz").read_bytes(), (self.root / "b.nii.gz").read_bytes())

	def testMissingFile(self) -> None:
		with self.assertRaises(NiftiIOError):
			readNifti(self.root / "missing.nii")

	def testCorruptGzip(self) -> None:
		path: Path = self.root / "corrupt.nii.gz"
		path.write_bytes(b"\x1f\x8bnot really gzip")
		with self.assertRaises(NiftiIOError):
			readNifti(path)

	def testInvalidVolumeIsRejectedBeforeWrite(self) -> None:
		volume = AffineVolume(np.zeros((2, 2, 2, 1)))
		object.__setattr__(volume, "data", np.zeros((2, 0, 2, 1), dtype=np.float32))
		path: Path = self.root / "empty.nii"
		with self.assertRaises(InvariantViolationError):
			writeNifti(volume, path)
		self.assertFalse(path.exists())

	def testFailedWriteLeavesNothing(self) -> None:
		path: Path = self.root / "out" / "volume.nii.gz"
		with patch("neuropipe.nifti.os.replace", side_effect=OSError("disk full")):
			with self.assertRaises(NiftiIOError):
				writeNifti(self.volume, path, gzip=True)
		self.assertEqual(list(path.parent.iterdir()), [])


def randomAffine(rng: np.random.Generator) -> np.ndarray:
	affine = np.eye(4)
	affine[:3, :3] = np.diag(rng.uniform(0.5, 3.0, 3)) + rng.uniform(-0.3, 0.3, (3, 3))
	affine[:3, 3] = rng.uniform(-100.0, 100.0, 3)
	return affine


def randomVolume(rng: np.random.Generator) -> AffineVolume:
	if rng.random() < 0.25:
		shape: tuple[int, ...] = (*(int(i) for i in rng.integers(1, 7, size=2)), 1)
	else:
		shape = (*(int(i) for i in rng.integers(1, 6, size=3)), int(rng.integers(1, 4)))
	data = (rng.standard_normal(shape) * rng.uniform(0.1, 1000.0)).astype(np.float32)
	return AffineVolume(data, randomAffine(rng))


class TestNiftiProperties(TestCase):
	def setUp(self) -> None:
		self.directory = tempfile.TemporaryDirectory()
		self.root = Path(self.directory.name)

	def tearDown(self) -> None:
		self.directory.cleanup()

	def testRandomFileRoundTrips(self) -> None:
		rng = np.random.default_rng(21)
		for number in range(120):
			volume: AffineVolume = randomVolume(rng)
			compress: bool = bool(number % 2)
			byteOrder: str = str(rng.choice(["<", ">"]))
			path: Path = self.root / (f"{number}.nii.gz" if compress else f"{number}.nii")
			with self.subTest(number=number, shape=volume.shape, gzip=compress, byteOrder=byteOrder):
				writeNifti(volume, path, gzip=compress, byteOrder=byteOrder)
				loaded: AffineVolume = readNifti(path)
				self.assertEqual(loaded.shape, volume.shape)
				self.assertEqual(loaded.data.tobytes(), volume.data.tobytes())
				np.testing.assert_allclose(loaded.affine, volume.affine, rtol=1e-6, atol=1e-5)
				self.assertEqual(readNiftiHeader(path).byteOrder, byteOrder)

	def testRandomStoredDatatypes(self) -> None:
		rng = np.random.default_rng(22)
		for number in range(100):
			datatype: int = int(rng.choice(sorted(SUPPORTED_DATATYPES)))
			byteOrder: str = str(rng.choice(["<", ">"]))
			extents = tuple(int(i) for i in rng.integers(1, 5, size=4))
			dim = (4, *extents, 1, 1, 1)
			values = rng.integers(0, 100, size=extents)
			stored = values.astype(SUPPORTED_DATATYPES[datatype].newbyteorder(byteOrder))
			header = NiftiHeader(
				dim=dim, datatype=datatype, bitpix=stored.dtype.itemsize * 8, byteOrder=byteOrder
			)
			with self.subTest(number=number, datatype=datatype, byteOrder=byteOrder):
				volume: AffineVolume = volumeFromBytes(encode(header, stored.tobytes(order="F")))
				self.assertEqual(volume.shape, extents)
				np.testing.assert_array_equal(volume.data, values.astype(np.float32))

	def testCorruptedBytesRaiseStructuredErrors(self) -> None:
		rng = np.random.default_rng(23)
		original: bytes = volumeToBytes(randomVolume(rng))
		for number in range(300):
			raw = bytearray(original)
			mode: int = number % 3
			if mode == 0:
				for position in rng.integers(0, VOX_OFFSET, size=int(rng.integers(1, 8))):
					raw[int(position)] = int(rng.integers(256))
			elif mode == 1:
				del raw[int(rng.integers(0, len(raw))) :]
			else:
				position = int(rng.integers(0, len(raw)))
				raw[position:position] = rng.bytes(int(rng.integers(1, 16)))
			with self.subTest(number=number, mode=mode):
				try:
					volumeFromBytes(bytes(raw))
				except NeuroPipeError:
					pass

	def testCorruptedGzipRaisesStructuredErrors(self) -> None:
		rng = np.random.default_rng(24)
		path: Path = self.root / "volume.nii.gz"
		writeNifti(randomVolume(rng), path, gzip=True)
		original: bytes = path.read_bytes()
		for number in range(100):
			raw = bytearray(original)
			for position in rng.integers(0, len(raw), size=int(rng.integers(1, 4))):
				raw[int(position)] = int(rng.integers(256))
			path.write_bytes(bytes(raw))
			with self.subTest(number=number):
				try:
					readNifti(path)
				except NeuroPipeError:
					pass
