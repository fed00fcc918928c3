import sys

from kster.evalbench.cli import main

sys.exit(main())
