import sys

from fxted.cli import main

sys.exit(main())
