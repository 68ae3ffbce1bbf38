import sys

from storypipe.cli import main

sys.exit(main())
