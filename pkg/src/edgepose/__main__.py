import sys

from edgepose.harness.cli import main

sys.exit(main())
