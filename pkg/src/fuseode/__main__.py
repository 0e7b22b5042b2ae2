import sys

from fuseode.cli import main

sys.exit(main())
