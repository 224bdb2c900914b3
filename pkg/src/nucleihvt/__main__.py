"""``python -m nucleihvt``."""

from .cli import main

raise SystemExit(main())
