import sys

from kacnet.cli import main

sys.exit(main())
