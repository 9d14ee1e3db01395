import sys

from raceweaver.cli import main

sys.exit(main())
