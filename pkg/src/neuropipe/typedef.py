# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

"""Shared type definitions."""

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import os
from collections.abc import Callable, Mapping
from typing import Any, Union

# Third-party Modules:
import numpy as np
import numpy.typing as npt
from knickknacks.typedef import TypeAlias


FloatArray: TypeAlias = npt.NDArray[np.floating[Any]]
Float32Array: TypeAlias = npt.NDArray[np.float32]
Float64Array: TypeAlias = npt.NDArray[np.float64]
IntArray: TypeAlias = npt.NDArray[np.integer[Any]]
BoolArray: TypeAlias = npt.NDArray[np.bool_]
PathType: TypeAlias = Union[str, "os.PathLike[str]"]
ShapeType: TypeAlias = tuple[int, ...]
JSONObjectType: TypeAlias = dict[str, Any]
JSONMappingType: TypeAlias = Mapping[str, Any]
TrainingCallbackType: TypeAlias = Callable[[JSONObjectType], None]


__all__: list[str] = [
	"BoolArray",
	"Float32Array",
	"Float64Array",
	"FloatArray",
	"IntArray",
	"JSONMappingType",
	"JSONObjectType",
	"PathType",
	"ShapeType",
	"TrainingCallbackType",
]
