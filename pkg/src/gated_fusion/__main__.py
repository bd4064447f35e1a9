"""Module entrypoint for python -m gated_fusion"""

from .cli import main

if __name__ == "__main__":
    raise SystemExit(main())
