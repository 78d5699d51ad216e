"""Allow running the lab from its directory: python -m . or python __main__.py"""

from main import cli

if __name__ == '__main__':
    cli()
