import sys

from rapo.cli import main

sys.exit(main())
