import sys

from qpf.cli import main

sys.exit(main())
