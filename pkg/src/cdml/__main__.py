import sys

from cdml.cli import main

sys.exit(main())
