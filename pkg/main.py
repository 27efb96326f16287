import sys

from mp_insertion.cli import main

if __name__ == "__main__":
    sys.exit(main())
