import sys

from capolab.harness.cli import main

sys.exit(main())
