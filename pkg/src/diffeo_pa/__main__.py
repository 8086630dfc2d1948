import sys

from diffeo_pa.cli import main

sys.exit(main())
