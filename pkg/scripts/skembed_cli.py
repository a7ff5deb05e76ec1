"""
Skorokhod embedding bound solver
Command-line entry point; see `python scripts/skembed_cli.py --help`
"""
import sys
import os

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from skembed.cli import run


def main():
    """Run one subcommand and exit with its status code"""
    sys.exit(run(sys.argv[1:]))


if __name__ == '__main__':
    main()
