import sys

from morphoflow.cli import main


def run():
    sys.exit(main())


if __name__ == '__main__':
    # Same as the console script: python -m morphoflow.main <command> ...
    run()
