from __future__ import annotations

import sys

from lossydc.cli import main

sys.exit(main())
