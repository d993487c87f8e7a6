import sys

from seqnr.cli import main

sys.exit(main())
