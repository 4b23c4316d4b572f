import sys

from purge_gate.cli import main

sys.exit(main())
