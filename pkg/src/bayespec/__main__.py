import sys

from bayespec.cli_io import main

sys.exit(main())
