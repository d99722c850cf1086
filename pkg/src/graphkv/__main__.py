import sys

from graphkv.cli import main

sys.exit(main())
