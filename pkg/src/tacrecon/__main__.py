import sys

from tacrecon.cli import main

sys.exit(main())
