import sys

from chaindiar.cli import main

sys.exit(main())
