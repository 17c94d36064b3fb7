import sys

from margokit.cli import main

if __name__ == "__main__":
    sys.exit(main())
