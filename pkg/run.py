#!/usr/bin/env python3
"""Entry point for the distributed resource reallocation simulator."""

from src.cli import cli

if __name__ == "__main__":
    cli()
