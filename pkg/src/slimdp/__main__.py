import sys

from slimdp.cli import main

sys.exit(main())
