"""Main entry point for the CLI."""

from .cli.main import main

if __name__ == "__main__":
    main()
