"""Entry point for running as module: python -m mccpde"""

from mccpde.cli import app

if __name__ == "__main__":
    app()
