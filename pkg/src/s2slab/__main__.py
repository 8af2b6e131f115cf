import sys

from s2slab.cli import main

sys.exit(main())
