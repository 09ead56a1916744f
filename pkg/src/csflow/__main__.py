import sys

from csflow.cli import main

sys.exit(main())
