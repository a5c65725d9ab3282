import sys

from boundary_transfer.cli import main

if __name__ == "__main__":
    sys.exit(main())
