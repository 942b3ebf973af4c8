import sys

from bussam.cli import main

sys.exit(main())
