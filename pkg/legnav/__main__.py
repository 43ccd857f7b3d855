import sys

from legnav.cli import main

sys.exit(main())
