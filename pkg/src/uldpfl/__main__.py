import sys

from .ui.main import main

# leveraged when calling as module ie "python -m uldpfl"

if __name__ == "__main__":
    sys.exit(main())
