import sys

from subjsync.cli import main

sys.exit(main())
