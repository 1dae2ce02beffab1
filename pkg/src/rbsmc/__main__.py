"""Allow ``python -m rbsmc`` as an alias for the ``rbsmc`` console script."""

from .cli import main

if __name__ == "__main__":
    raise SystemExit(main())
