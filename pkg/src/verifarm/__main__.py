import sys

from verifarm.cli import main

sys.exit(main())
