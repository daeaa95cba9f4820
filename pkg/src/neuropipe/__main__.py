# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

# Future Modules:
from __future__ import annotations

# Built-in Modules:
import sys

# Local Modules:
from .cli import main


if __name__ == "__main__":  # pragma: no cover
	sys.exit(main())
