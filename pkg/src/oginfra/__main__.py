import sys

from oginfra.cli import main

sys.exit(main())
