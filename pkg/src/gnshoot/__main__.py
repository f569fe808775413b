import sys

from gnshoot.cli import main

sys.exit(main())
