import sys

from volpose.cli import main

sys.exit(main())
