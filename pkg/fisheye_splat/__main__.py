import sys

from fisheye_splat.cli import main

sys.exit(main())
