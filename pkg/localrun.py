import sys

from src.uldpfl.ui.main import main

if __name__ == "__main__":
    sys.exit(main())
