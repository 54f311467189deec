import sys

from blocksim.harness.cli import main

if __name__ == "__main__":
    sys.exit(main())
