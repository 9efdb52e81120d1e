import sys

from eve_rl.cli import main

sys.exit(main())
