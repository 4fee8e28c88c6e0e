import sys

from keep.cli import main

sys.exit(main())
