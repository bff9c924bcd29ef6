import sys

from fscgrad.cli import main

sys.exit(main())
