import sys

from dunmri.cli import main

sys.exit(main())
