import sys

from pica.harness import main

sys.exit(main())
