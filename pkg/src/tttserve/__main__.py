import sys

from tttserve.harness.cli import main

sys.exit(main())
