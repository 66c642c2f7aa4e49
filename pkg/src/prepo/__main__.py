import sys

from prepo.cli import main

sys.exit(main())
